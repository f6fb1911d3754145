"""Ranking and report tests."""

# run these tests like:
#
#    python -m unittest test_evaluation.py


import math
from unittest import TestCase

import numpy as np
import scipy.sparse as sp

from dataset import Dataset, IdMap
from errors import EmptySubset
from evaluation import (RankedList, compute_metrics, cold_start_report, cold_start_users,
                        evaluate_split, popularity_group_report, rank_for_user, rank_users,
                        relative_report, threshold_report, timing_report)


class FixedScores:
    """Stands in for a model: a fixed (users x items) score table."""

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)

    def score_all(self, users):
        return self.scores[np.asarray(users)]


def table(rows, shape):
    pairs = [(u, i) for u, items in rows.items() for i in items]
    return sp.csr_matrix((np.ones(len(pairs), dtype=np.float32),
                          ([u for u, _ in pairs], [i for _, i in pairs])), shape=shape)


def split(train, test, n_users, n_items, valid=None):
    shape = (n_users, n_items)
    return Dataset(
        ui_train=table(train, shape),
        ui_valid=table(valid or {}, shape),
        ui_test=table(test, shape),
        it_labels=sp.csr_matrix((n_items, 1), dtype=np.float32),
        users=IdMap(range(n_users)),
        items=IdMap(range(n_items)),
        tags=IdMap(["t"]),
    )


class RankTestCase(TestCase):
    """Tests for top-N ranking."""

    def test_sorted_by_score(self):
        dataset = split({}, {}, 1, 3)
        ranked = rank_for_user(0, FixedScores([[0.9, 0.1, 0.5]]), dataset, N=3)
        self.assertEqual(list(ranked.items), [0, 2, 1])
        np.testing.assert_array_equal(ranked.scores, [0.9, 0.5, 0.1])

    def test_ties_by_item_id(self):
        dataset = split({}, {}, 1, 5)
        ranked = rank_for_user(0, FixedScores([[0.3] * 5]), dataset, N=5)
        self.assertEqual(list(ranked.items), [0, 1, 2, 3, 4])

    def test_train_items_excluded(self):
        """Are training items never recommended, even when they score highest?"""

        dataset = split({0: [0, 2]}, {}, 1, 4)
        ranked = rank_for_user(0, FixedScores([[9.0, 1.0, 8.0, 2.0]]), dataset, N=20)
        self.assertEqual(list(ranked.items), [3, 1])

    def test_batched_matches_single(self):
        rng = np.random.default_rng(0)
        model = FixedScores(rng.random((7, 9)))
        dataset = split({u: [u] for u in range(7)}, {}, 7, 9)

        batched = rank_users(model, dataset, range(7), N=4, block=3)
        for u, ranked in enumerate(batched):
            np.testing.assert_array_equal(ranked.items,
                                          rank_for_user(u, model, dataset, 4).items)


class MetricsTestCase(TestCase):
    """Tests for Recall@N and NDCG@N."""

    def test_half_recall(self):
        test = table({0: [0, 1, 2, 3, 4, 5]}, (1, 30))
        ranked = [RankedList(0, np.array([0, 1, 2] + list(range(10, 27))), None)]
        self.assertEqual(compute_metrics(ranked, test, 20)["recall@20"], 0.5)

    def test_ndcg_rank_one(self):
        test = table({0: [4]}, (1, 10))
        ranked = [RankedList(0, np.array([4, 1, 2]), None)]
        self.assertEqual(compute_metrics(ranked, test, 20)["ndcg@20"], 1.0)

    def test_ndcg_rank_two(self):
        test = table({0: [4]}, (1, 10))
        ranked = [RankedList(0, np.array([1, 4, 2]), None)]
        ndcg = compute_metrics(ranked, test, 20)["ndcg@20"]
        self.assertAlmostEqual(ndcg, 1 / math.log2(3), places=12)
        self.assertAlmostEqual(ndcg, 0.6309, places=4)

    def test_users_without_test_skipped(self):
        test = table({1: [0]}, (2, 3))
        ranked = [RankedList(0, np.array([1, 2]), None), RankedList(1, np.array([0]), None)]
        metrics = compute_metrics(ranked, test, 20)

        self.assertEqual(metrics["users"], 1)
        self.assertEqual(metrics["recall@20"], 1.0)

    def test_several_cutoffs(self):
        dataset = split({}, {0: [2]}, 1, 3)
        metrics = evaluate_split(FixedScores([[0.9, 0.5, 0.1]]), dataset, "test", (1, 3))

        self.assertEqual(metrics["recall@1"], 0.0)
        self.assertEqual(metrics["recall@3"], 1.0)
        self.assertAlmostEqual(metrics["ndcg@3"], 0.5)

    def test_full_list_recall(self):
        """Does ranking every item reach every test item?"""

        rng = np.random.default_rng(2)
        dataset = split({}, {0: [1, 4], 1: [0, 2, 3]}, 2, 6)
        metrics = evaluate_split(FixedScores(rng.random((2, 6))), dataset, "test", (6,))
        self.assertEqual(metrics["recall@6"], 1.0)


class ReportTestCase(TestCase):
    """Tests for popularity, cold-start, timing and relative reports."""

    def setUp(self):
        # item ids ascend with training degree, so they are also popularity ranks
        train = {u: [i for i in range(10) if i > u and not (u == 0 and i >= 8)]
                 for u in range(10)}
        self.dataset = split(train, {0: [8, 9], 2: [1]}, 10, 10)

    def test_group_sizes(self):
        report = popularity_group_report(self.dataset, [])
        self.assertEqual(report.boundaries, [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)])

    def test_hits_in_top_group(self):
        """Do hits on the two most popular items land only in G5?"""

        ranked = [RankedList(0, np.array([9, 8]), None), RankedList(2, np.array([0]), None)]
        report = popularity_group_report(self.dataset, ranked)

        np.testing.assert_array_equal(report.contributions[:4], 0.0)
        self.assertAlmostEqual(report.contributions[4], 0.5)
        recall = compute_metrics(ranked, self.dataset.ui_test, 20)["recall@20"]
        self.assertAlmostEqual(report.recall, recall)
        self.assertAlmostEqual(float(np.sum(report.contributions)), recall, places=9)
        self.assertEqual(len(report.to_frame()), 5)

    def test_cold_start_subset(self):
        """Is a user with 7 training items included at threshold 10?"""

        self.assertIn(2, cold_start_users(self.dataset, threshold=10))
        self.assertNotIn(2, cold_start_users(self.dataset, threshold=7))
        self.assertNotIn(3, cold_start_users(self.dataset, threshold=10))

    def test_cold_start_empty(self):
        dense = split({0: list(range(10))}, {0: [11]}, 1, 12)
        with self.assertRaises(EmptySubset):
            cold_start_report(FixedScores(np.zeros((1, 12))), dense, threshold=10)

    def test_timing_empty(self):
        frame = timing_report([])
        self.assertEqual(list(frame.columns), ["cumulative_seconds", "best_recall"])
        self.assertEqual(frame.to_csv(index=False), "cumulative_seconds,best_recall\n")

    def test_timing_cumulative(self):
        history = [{"epoch": 1, "seconds": 10.0, "valid_recall@20": 0.2},
                   {"epoch": 2, "seconds": 10.0, "valid_recall@20": 0.1}]
        frame = timing_report(history)

        self.assertEqual(list(frame["cumulative_seconds"]), [10.0, 20.0])
        self.assertEqual(list(frame["best_recall"]), [0.2, 0.2])

    def test_relative(self):
        frame = relative_report({"a": {"G1": 0.2, "G2": 0.5}, "b": {"G1": 0.1, "G2": 1.0}})
        self.assertEqual(frame.loc["a", "G1"], 1.0)
        self.assertEqual(frame.loc["b", "G1"], 0.5)
        self.assertEqual(frame.loc["a", "G2"], 0.5)

    def test_threshold(self):
        self.assertEqual(threshold_report({0.7: 0.3, 0.1: 0.15}, 0.15), {0.1: 1.0, 0.7: 2.0})

    def test_threshold_zero_baseline(self):
        self.assertEqual(threshold_report({0.7: 0.3, 0.1: 0.0}, 0.0), {0.1: 0.0, 0.7: 0.0})
