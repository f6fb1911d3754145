"""Model tests: parameters, scoring, propagation, BPR loss and checkpoints."""

# run these tests like:
#
#    python -m unittest test_models.py


import math
import os
import tempfile
from unittest import TestCase

import numpy as np
import scipy.sparse as sp

from dataset import ITEM_TAG, USER_ITEM, BprBatch
from errors import CheckpointError, DimError, DimMismatch, StaleCache
from models import (LIGHTGCN, NEUMF, ModelDims, build_adjacency, bpr_loss,
                    check_compatible, init_parameters, lightgcn_propagate, load_checkpoint,
                    save_checkpoint, score, softplus)
from trainer import tiny_problem


class ParameterTestCase(TestCase):
    """Tests for shapes and initialization."""

    def test_chunk_dim(self):
        self.assertEqual(ModelDims(3, 4, 5, d=64, K=4).chunk_dim, 16)

    def test_indivisible(self):
        with self.assertRaises(DimError):
            init_parameters(ModelDims(3, 4, 5, d=64, K=5))

    def test_same_seed_same_tables(self):
        dims = ModelDims(3, 4, 5, d=8, K=2, backbone=NEUMF)
        first = init_parameters(dims, seed=5)
        second = init_parameters(dims, seed=5)

        self.assertEqual(set(first.params), set(second.params))
        for name in first.params:
            np.testing.assert_array_equal(first.params[name], second.params[name])

    def test_named_groups(self):
        """Does every backbone expose the expected parameter names?"""

        bprmf = init_parameters(ModelDims(3, 4, 5, d=8, K=2))
        neumf = init_parameters(ModelDims(3, 4, 5, d=8, K=2, backbone=NEUMF))

        self.assertEqual(set(bprmf.params),
                         {"user", "item", "tag", "centers", "W0", "b0", "W1", "b1", "W2"})
        self.assertTrue({"mlp_W1", "mlp_b3"} <= set(neumf.params))
        self.assertEqual(bprmf.params["W0"].shape, (2, 4, 8))
        self.assertEqual(bprmf.embeddings.chunk(bprmf.params["user"], 1).shape, (3, 4))


class ScoreTestCase(TestCase):
    """Tests for backbone scoring."""

    def setUp(self):
        self.model = init_parameters(ModelDims(2, 2, 1, d=4, K=2), dtype=np.float64)
        self.model.params["user"][...] = [[1, 0, 0, 0], [0, 1, 0, 0]]
        self.model.params["item"][...] = [[1, 0, 0, 0], [0, 0, 1, 0]]

    def test_unit_overlap(self):
        self.assertEqual(score(self.model, 0, 0), 1.0)

    def test_orthogonal(self):
        self.assertEqual(score(self.model, 1, 1), 0.0)

    def test_score_all_matches_pairs(self):
        block = self.model.score_all([0, 1])
        self.assertEqual(block.shape, (2, 2))
        self.assertEqual(block[0, 0], score(self.model, 0, 0))

    def test_neumf_zero_weights(self):
        """With an all-zero MLP, is the score the last bias?"""

        model = init_parameters(ModelDims(2, 3, 1, d=4, K=2, backbone=NEUMF), dtype=np.float64)
        for name in ("mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2", "mlp_W3"):
            model.params[name][...] = 0.0
        model.params["mlp_b3"][...] = 0.25

        self.assertEqual(score(model, 1, 2), 0.25)
        np.testing.assert_allclose(model.score_all([0, 1]), 0.25)

    def test_neumf_score_all_matches_pairs(self):
        model = init_parameters(ModelDims(3, 5, 1, d=4, K=2, backbone=NEUMF), seed=2,
                                dtype=np.float64)
        block = model.score_all([0, 1, 2], block=2)
        for u in range(3):
            for i in range(5):
                self.assertAlmostEqual(block[u, i], score(model, u, i), places=12)


class LightGCNTestCase(TestCase):
    """Tests for propagation."""

    def test_two_node_graph(self):
        """Is one layer over a single edge the mean of both rows?"""

        adjacency = build_adjacency(sp.csr_matrix(np.array([[1.0]])))
        u = np.array([[1.0, 2.0]])
        v = np.array([[3.0, 0.0]])

        users, items = lightgcn_propagate(u, v, adjacency, n_layers=1)
        np.testing.assert_allclose(users, (u + v) / 2)
        np.testing.assert_allclose(items, (u + v) / 2)

    def test_zero_layers(self):
        adjacency = build_adjacency(sp.csr_matrix(np.eye(2)))
        u = np.arange(4.0).reshape(2, 2)
        users, _ = lightgcn_propagate(u, u + 1, adjacency, n_layers=0)
        np.testing.assert_array_equal(users, u)

    def test_isolated_node(self):
        """Does an isolated user keep only its own layer-0 share?"""

        adjacency = build_adjacency(sp.csr_matrix(np.array([[1.0], [0.0]])))
        u = np.array([[1.0, 1.0], [2.0, 4.0]])
        v = np.array([[1.0, 0.0]])

        users, _ = lightgcn_propagate(u, v, adjacency, n_layers=2)
        np.testing.assert_allclose(users[1], u[1] / 3)

    def test_zero_in_zero_out(self):
        adjacency = build_adjacency(sp.random(4, 5, density=0.5, random_state=0, format="csr"))
        users, items = lightgcn_propagate(np.zeros((4, 3)), np.zeros((5, 3)), adjacency)
        self.assertFalse(users.any() or items.any())

    def test_adjacency_symmetric(self):
        adjacency = build_adjacency(sp.random(4, 5, density=0.5, random_state=1, format="csr"))
        self.assertAlmostEqual(abs(adjacency - adjacency.T).max(), 0.0)

    def test_stale_cache(self):
        """Does changing the adjacency without propagating refuse to score?"""

        dataset = tiny_problem()
        model = init_parameters(ModelDims(6, 7, 8, d=4, K=2, backbone=LIGHTGCN),
                                adjacency=build_adjacency(dataset.ui_train))
        model.set_adjacency(build_adjacency(dataset.ui_train))

        with self.assertRaises(StaleCache):
            model.score(0, 0)
        model.propagate()
        self.assertTrue(math.isfinite(model.score(0, 0)))


class BprLossTestCase(TestCase):
    """Tests for the pairwise ranking loss."""

    def setUp(self):
        self.model = init_parameters(ModelDims(2, 3, 2, d=2, K=1), dtype=np.float64)
        self.model.params["user"][...] = [[1.0, 0.0], [0.0, 1.0]]
        self.model.params["item"][...] = [[20.0, 0.0], [0.0, 0.0], [0.0, 0.0]]

    def test_tied_scores(self):
        """Is the loss ln 2 when positive and negative score the same?"""

        batch = BprBatch(np.array([1]), np.array([1]), np.array([2]), USER_ITEM)
        loss, _ = bpr_loss(batch, self.model)
        self.assertAlmostEqual(loss, math.log(2), places=12)

    def test_large_margin(self):
        batch = BprBatch(np.array([0]), np.array([0]), np.array([1]), USER_ITEM)
        loss, _ = bpr_loss(batch, self.model)
        self.assertAlmostEqual(loss, 2.061153622e-9, delta=1e-15)

    def test_item_tag_tied(self):
        self.model.params["tag"][...] = 0.0
        batch = BprBatch(np.array([0, 2]), np.array([0, 1]), np.array([1, 0]), ITEM_TAG)
        loss, grads = bpr_loss(batch, self.model)

        self.assertAlmostEqual(loss, math.log(2), places=12)
        self.assertFalse(grads["user"].any())

    def test_softplus_stable(self):
        self.assertTrue(np.isfinite(softplus(np.array([1000.0, -1000.0]))).all())

    def test_empty_batch(self):
        with self.assertRaises(ValueError):
            bpr_loss(BprBatch(np.array([]), np.array([]), np.array([]), USER_ITEM), self.model)


class CheckpointTestCase(TestCase):
    """Tests for the binary checkpoint layout."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "ckpt.imck")

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_and_load(self):
        """Does a NeuMF checkpoint read back with identical tables?"""

        model = init_parameters(ModelDims(3, 4, 5, d=4, K=2, backbone=NEUMF), seed=9)
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)

        self.assertEqual(loaded.dims, model.dims)
        for name, table in model.params.items():
            np.testing.assert_array_equal(loaded.params[name], table)

    def test_header(self):
        save_checkpoint(init_parameters(ModelDims(3, 4, 5, d=4, K=2)), self.path)
        with open(self.path, "rb") as handle:
            self.assertEqual(handle.read(4), b"IMCK")

    def test_truncated(self):
        save_checkpoint(init_parameters(ModelDims(3, 4, 5, d=4, K=2)), self.path)
        with open(self.path, "rb") as handle:
            blob = handle.read()
        with open(self.path, "wb") as handle:
            handle.write(blob[:-4])

        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_incompatible(self):
        dataset = tiny_problem()
        model = init_parameters(ModelDims(6, 7, 8, d=4, K=2))

        check_compatible(model, dataset)
        with self.assertRaises(DimMismatch):
            check_compatible(model, dataset, d=8)
        with self.assertRaises(DimMismatch):
            check_compatible(init_parameters(ModelDims(6, 9, 8, d=4, K=2)), dataset)

    def test_backbone_name_survives(self):
        model = init_parameters(ModelDims(3, 4, 5, d=4, K=2, backbone=LIGHTGCN))
        save_checkpoint(model, self.path)
        self.assertEqual(load_checkpoint(self.path).dims.backbone, LIGHTGCN)
