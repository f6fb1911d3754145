"""Full-ranking evaluation: Recall@N, NDCG@N and the group/cold-start/timing reports."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import EmptySubset

logger = logging.getLogger(__name__)

N_GROUPS = 5


@dataclass(frozen=True, eq=False)
class RankedList:
    user: int
    items: np.ndarray
    scores: np.ndarray


@dataclass(eq=False)
class GroupReport:
    """Per-popularity-group share of overall Recall@N, G1 least popular."""

    boundaries: list
    contributions: np.ndarray
    recall: float
    normalization: np.ndarray = None

    def to_frame(self):
        frame = pd.DataFrame({
            "group": [f"G{g + 1}" for g in range(len(self.contributions))],
            "first_item_rank": [b[0] for b in self.boundaries],
            "last_item_rank": [b[1] for b in self.boundaries],
            "contribution": self.contributions,
        })
        if self.normalization is not None:
            frame["normalized"] = self.contributions / np.where(self.normalization > 0,
                                                                self.normalization, 1.0)
        return frame


def _split_table(dataset, split):
    return {"train": dataset.ui_train, "valid": dataset.ui_valid,
            "test": dataset.ui_test}[split]


def _row(table, user):
    return table.indices[table.indptr[user]:table.indptr[user + 1]]


def _top_n(scores, excluded, N):
    """Top-N columns by score, ties to the lower item id, excluded ids removed."""

    scores = np.array(scores, dtype=np.float64)
    scores[excluded] = -np.inf
    n_candidates = len(scores) - len(excluded)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:min(N, n_candidates)]


def rank_for_user(user, model, dataset, N=20):
    """Top-N items for `user`, never including the user's training items."""

    scores = model.score_all(np.array([user]))[0]
    items = _top_n(scores, _row(dataset.ui_train, user), N)
    return RankedList(user=int(user), items=items, scores=scores[items])


def rank_users(model, dataset, users, N=20, block=256):
    """RankedList for each of `users`, scored a block of users at a time."""

    users = np.asarray(users, dtype=np.int64)
    ranked = []
    for start in range(0, len(users), block):
        chunk = users[start:start + block]
        scores = model.score_all(chunk)
        for row, user in enumerate(chunk):
            items = _top_n(scores[row], _row(dataset.ui_train, user), N)
            ranked.append(RankedList(user=int(user), items=items, scores=scores[row][items]))
    return ranked


def _dcg_discounts(N):
    return 1.0 / np.log2(np.arange(2, N + 2))


def user_metrics(ranked, truth, N):
    """(recall, ndcg) of one ranked list against one ground-truth set."""

    truth = set(int(i) for i in truth)
    top = [int(i) for i in ranked.items[:N]]
    hits = np.array([item in truth for item in top], dtype=np.float64)
    discounts = _dcg_discounts(N)
    dcg = float(np.sum(hits * discounts[:len(hits)]))
    idcg = float(np.sum(discounts[:min(len(truth), N)]))
    return hits.sum() / len(truth), dcg / idcg


def compute_metrics(ranked_lists, truth_table, N=20):
    """Recall@N and NDCG@N averaged over users with a nonempty ground truth."""

    recalls, ndcgs = [], []
    for ranked in sorted(ranked_lists, key=lambda r: r.user):
        truth = _row(truth_table, ranked.user)
        if len(truth) == 0:
            continue
        recall, ndcg = user_metrics(ranked, truth, N)
        recalls.append(recall)
        ndcgs.append(ndcg)

    if not recalls:
        return {f"recall@{N}": 0.0, f"ndcg@{N}": 0.0, "users": 0}
    return {f"recall@{N}": float(np.mean(recalls)), f"ndcg@{N}": float(np.mean(ndcgs)),
            "users": len(recalls)}


def evaluate_split(model, dataset, split="test", Ns=(20,), users=None):
    """Metrics for every N in `Ns` over users with items in `split`."""

    table = _split_table(dataset, split)
    if users is None:
        users = np.flatnonzero(np.diff(table.indptr))
    ranked = rank_users(model, dataset, users, max(Ns))
    metrics = {}
    for N in Ns:
        metrics.update(compute_metrics(ranked, table, N))
    return metrics


def popularity_groups(dataset, n_groups=N_GROUPS):
    """Item ids split into equal-count groups by ascending training degree."""

    degrees = dataset.item_degrees()
    order = np.argsort(degrees, kind="stable")
    return np.array_split(order, n_groups)


def popularity_group_report(dataset, ranked_lists, truth_table=None, N=20, n_groups=N_GROUPS):
    """Each popularity group's share of the overall Recall@N.

    A user's hit on an item in group g counts 1/|test_u| towards g; shares are
    averaged over users so they add up to the overall recall.
    """

    truth_table = dataset.ui_test if truth_table is None else truth_table
    groups = popularity_groups(dataset, n_groups)
    group_of = np.empty(dataset.n_items, dtype=np.int64)
    boundaries = []
    start = 0
    for g, members in enumerate(groups):
        group_of[members] = g
        boundaries.append((start, start + len(members) - 1))
        start += len(members)

    shares, ceilings = [], []
    for ranked in sorted(ranked_lists, key=lambda r: r.user):
        truth = _row(truth_table, ranked.user)
        if len(truth) == 0:
            continue
        top = ranked.items[:N]
        hits = top[np.isin(top, truth)]
        shares.append(np.bincount(group_of[hits], minlength=n_groups) / len(truth))
        ceilings.append(np.bincount(group_of[truth], minlength=n_groups) / len(truth))

    contributions = np.mean(shares, axis=0) if shares else np.zeros(n_groups)
    normalization = np.mean(ceilings, axis=0) if ceilings else np.zeros(n_groups)
    return GroupReport(boundaries=boundaries, contributions=contributions,
                       recall=float(contributions.sum()), normalization=normalization)


def cold_start_users(dataset, threshold=10):
    """Users with fewer than `threshold` training items and some test items."""

    train_degree = np.diff(dataset.ui_train.indptr)
    has_test = np.diff(dataset.ui_test.indptr) > 0
    return np.flatnonzero((train_degree < threshold) & has_test)


def cold_start_report(model, dataset, threshold=10, Ns=(20,)):
    """Test metrics restricted to sparse users."""

    users = cold_start_users(dataset, threshold)
    if len(users) == 0:
        raise EmptySubset(f"no user has fewer than {threshold} training interactions")
    metrics = evaluate_split(model, dataset, "test", Ns, users=users)
    metrics["threshold"] = threshold
    return metrics


def timing_report(history):
    """Cumulative wall-clock seconds against the best validation recall so far."""

    columns = ["cumulative_seconds", "best_recall"]
    if not history:
        return pd.DataFrame(columns=columns)

    recall_key = next(key for key in history[0] if key.startswith("valid_recall@"))
    seconds = np.cumsum([record["seconds"] for record in history])
    best = np.maximum.accumulate([record[recall_key] for record in history])
    return pd.DataFrame({"cumulative_seconds": seconds, "best_recall": best}, columns=columns)


def relative_report(rows):
    """Divide each column by its best value across models.

    `rows` maps model name to {column: value}; the result has the same shape
    with every best entry equal to 1.
    """

    frame = pd.DataFrame(rows).T
    best = frame.max(axis=0).replace(0, np.nan)
    return (frame / best).fillna(0.0)


def threshold_report(recall_by_delta, recall_without_isa):
    """Recall at each delta as a fraction of the no-ISA recall.

    A zero baseline gives 0 for every delta, as in `relative_report`.
    """

    if not recall_without_isa:
        return {delta: 0.0 for delta in sorted(recall_by_delta)}
    return {delta: recall / recall_without_isa for delta, recall in sorted(recall_by_delta.items())}
