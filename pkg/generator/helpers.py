"""Support functions for synthetic dataset generation."""

import os
from datetime import datetime

import numpy as np
import pandas as pd

UI_COLUMNS = ["user", "item", "rating", "timestamp"]
IT_COLUMNS = ["item", "tag"]


def get_random_timestamps(rng, size, year_gap=2):
    """Unix timestamps spread over the last few years."""

    now = datetime.now()
    then = now.replace(year=now.year - year_gap)
    return rng.integers(int(then.timestamp()), int(now.timestamp()), size=size)


def make_synthetic(n_users=200, n_items=300, n_tags=60, n_intents=4, items_per_user=25,
                   tags_per_item=5, purity=0.8, seed=0):
    """Users, items and tags driven by `n_intents` latent intents.

    Each tag belongs to one intent. Each item mixes intents (Dirichlet) and
    draws its tags mostly from its leading intent; `purity` is the chance a
    tag comes from there. Users prefer one intent and rate matching items
    higher, so the rating filter keeps intent-consistent pairs.

    Returns (ui, it) DataFrames with UI_COLUMNS and IT_COLUMNS.
    """

    rng = np.random.default_rng(seed)
    tag_intent = np.arange(n_tags) % n_intents
    item_mix = rng.dirichlet(np.full(n_intents, 0.3), size=n_items)
    item_intent = item_mix.argmax(axis=1)
    user_intent = rng.integers(0, n_intents, size=n_users)

    it_rows = []
    for item in range(n_items):
        own = np.flatnonzero(tag_intent == item_intent[item])
        for _ in range(tags_per_item):
            pool = own if rng.random() < purity else np.arange(n_tags)
            it_rows.append((f"i{item}", f"t{rng.choice(pool)}"))
    it = pd.DataFrame(it_rows, columns=IT_COLUMNS).drop_duplicates()

    ui_rows = []
    for user in range(n_users):
        affinity = item_mix[:, user_intent[user]] + 0.05
        items = rng.choice(n_items, size=min(items_per_user, n_items), replace=False,
                           p=affinity / affinity.sum())
        for item in items:
            match = item_intent[item] == user_intent[user]
            rating = rng.integers(4, 6) if match else rng.integers(1, 6)
            ui_rows.append((f"u{user}", f"i{item}", float(rating)))
    ui = pd.DataFrame(ui_rows, columns=UI_COLUMNS[:3])
    ui["timestamp"] = get_random_timestamps(rng, len(ui))

    return ui, it


def write_tsvs(ui, it, out_dir):
    """Write ui.tsv and it.tsv (no header) and return their paths."""

    os.makedirs(out_dir, exist_ok=True)
    ui_path = os.path.join(out_dir, "ui.tsv")
    it_path = os.path.join(out_dir, "it.tsv")
    ui.to_csv(ui_path, sep="\t", header=False, index=False, columns=UI_COLUMNS)
    it.to_csv(it_path, sep="\t", header=False, index=False, columns=IT_COLUMNS)
    return ui_path, it_path
