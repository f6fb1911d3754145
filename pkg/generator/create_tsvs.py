"""Generate TSVs of synthetic latent-intent data.

The files feed `app.py prepare` for smoke runs; rerun this only to change the
sizes below. `app.py synth` does the same with command-line options.
"""

from helpers import make_synthetic, write_tsvs

NUM_USERS = 300
NUM_ITEMS = 400
NUM_TAGS = 80
NUM_INTENTS = 4
ITEMS_PER_USER = 30
TAGS_PER_ITEM = 6

ui, it = make_synthetic(
    n_users=NUM_USERS,
    n_items=NUM_ITEMS,
    n_tags=NUM_TAGS,
    n_intents=NUM_INTENTS,
    items_per_user=ITEMS_PER_USER,
    tags_per_item=TAGS_PER_ITEM,
)

ui_path, it_path = write_tsvs(ui, it, 'generator')
print(f"wrote {len(ui)} interactions to {ui_path} and {len(it)} labels to {it_path}")
