"""Command-line tests."""

# run these tests like:
#
#    python -m unittest test_app.py


import json
import os
import shutil
import tempfile
from unittest import TestCase
from unittest.mock import patch

import click
import pandas as pd
from click.testing import CliRunner

# BEFORE we import the app, point the run registry and the default bundle
# at a scratch directory so tests never touch a real registry

SCRATCH = tempfile.mkdtemp(prefix="imcat-test-")
os.environ['IMCAT_DATABASE_URL'] = "sqlite:///" + os.path.join(SCRATCH, "runs.db")
os.environ['IMCAT_DATA_DIR'] = os.path.join(SCRATCH, "bundle")

# Now we can import app

from app import cell_name, cli, expand_axes
from errors import StaleCache
from registry import FAILED, FINISHED, Run, RunMetric, connect_db
from trainer import GRID

TRAIN_SETTINGS = ["d=4", "K=2", "batch_size=64", "max_epochs=2", "pretrain_epochs=1",
                  "delta=0.3", "cluster_update_every=5"]


def invoke(*args):
    runner = CliRunner(mix_stderr=False)
    return runner.invoke(cli, [str(arg) for arg in args])


class CliTestCase(TestCase):
    """End-to-end: synth -> prepare -> train -> evaluate."""

    @classmethod
    def setUpClass(cls):
        cls.bundle = os.environ['IMCAT_DATA_DIR']
        cls.raw = os.path.join(SCRATCH, "raw")
        cls.run_dir = os.path.join(SCRATCH, "runs", "base")

        result = invoke("synth", "--out", cls.raw, "--users", 40, "--items", 30, "--tags", 12,
                        "--intents", 2, "--items-per-user", 12, "--tags-per-item", 4)
        assert result.exit_code == 0, result.output

        result = invoke("prepare", "--ui", os.path.join(cls.raw, "ui.tsv"),
                        "--it", os.path.join(cls.raw, "it.tsv"), "--out", cls.bundle,
                        "--ui-columns", "user,item,rating,timestamp",
                        "--min-user", 3, "--min-item", 3, "--min-tag", 2)
        assert result.exit_code == 0, result.output
        cls.stats = json.loads(result.stdout)

        args = ["train", "--set", f"run.dir={cls.run_dir}"]
        for setting in TRAIN_SETTINGS:
            args += ["--set", setting]
        result = invoke(*args)
        assert result.exit_code == 0, result.output
        cls.summary = json.loads(result.stdout)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(SCRATCH, ignore_errors=True)

    def test_prepare_stats(self):
        for name in ("ui_train.bin", "ui_test.bin", "it_labels.bin", "stats.json"):
            self.assertTrue(os.path.exists(os.path.join(self.bundle, name)), name)
        self.assertGreater(self.stats["n_users"], 0)
        self.assertLessEqual(self.stats["ui_density"], 1.0)

    def test_prepare_needs_tags(self):
        """Is leaving out --it a usage error?"""

        result = invoke("prepare", "--ui", os.path.join(self.raw, "ui.tsv"),
                        "--out", os.path.join(SCRATCH, "other"))
        self.assertEqual(result.exit_code, 2)

    def test_prepare_bad_columns(self):
        result = invoke("prepare", "--ui", os.path.join(self.raw, "ui.tsv"),
                        "--it", os.path.join(self.raw, "it.tsv"),
                        "--out", os.path.join(SCRATCH, "other"))
        self.assertEqual(result.exit_code, 1)

    def test_train_outputs(self):
        self.assertEqual(self.summary["epochs"], 2)
        for name in ("config.json", "history.jsonl", "ckpt_best.imck", "ckpt_last.imck"):
            self.assertTrue(os.path.exists(os.path.join(self.run_dir, name)), name)

    def test_run_registered(self):
        Session = connect_db()
        with Session() as session:
            run = session.query(Run).filter_by(run_dir=self.run_dir).first()
            self.assertEqual(run.status, FINISHED)
            self.assertEqual(run.K, 2)

        result = invoke("runs", "--status", FINISHED)
        self.assertEqual(result.exit_code, 0)
        self.assertIn(self.run_dir, [row["run_dir"] for row in json.loads(result.stdout)])

    def test_unknown_setting(self):
        result = invoke("train", "--set", "alpah=1")
        self.assertEqual(result.exit_code, 1)

    def test_failed_run_marked(self):
        """Does any domain error during training leave the run marked failed?"""

        run_dir = os.path.join(SCRATCH, "runs", "broken")
        args = ["train", "--set", f"run.dir={run_dir}"]
        for setting in TRAIN_SETTINGS:
            args += ["--set", setting]
        with patch("app.train", side_effect=StaleCache("propagation is out of date")):
            result = invoke(*args)
        self.assertEqual(result.exit_code, 1)

        Session = connect_db()
        with Session() as session:
            run = session.query(Run).filter_by(run_dir=run_dir).first()
            self.assertEqual(run.status, FAILED)

    def test_evaluate_reports(self):
        """Does evaluate write metrics, five popularity groups and a timing curve?"""

        result = invoke("evaluate", "--run", self.run_dir, "--groups", "--timing",
                        "--topn", 10, "--topn", 20)
        self.assertEqual(result.exit_code, 0, result.output)

        with open(os.path.join(self.run_dir, "metrics.json")) as handle:
            metrics = json.load(handle)
        self.assertIn("recall@10", metrics["test"])
        self.assertIn("ndcg@20", metrics["test"])

        groups = pd.read_csv(os.path.join(self.run_dir, "groups.csv"))
        self.assertEqual(list(groups["group"]), ["G1", "G2", "G3", "G4", "G5"])
        timing = pd.read_csv(os.path.join(self.run_dir, "timing.csv"))
        self.assertEqual(len(timing), 2)

        Session = connect_db()
        with Session() as session:
            self.assertGreater(session.query(RunMetric).filter_by(split="test").count(), 0)

    def test_evaluate_incompatible(self):
        """Does a config whose d disagrees with the checkpoint exit with 1?"""

        other = os.path.join(SCRATCH, "runs", "wrong-d")
        shutil.copytree(self.run_dir, other, dirs_exist_ok=True)
        with open(os.path.join(other, "config.json")) as handle:
            config = json.load(handle)
        config["d"] = 8
        with open(os.path.join(other, "config.json"), "w") as handle:
            json.dump(config, handle)

        result = invoke("evaluate", "--run", other)
        self.assertEqual(result.exit_code, 1)

    def test_inspect_clusters(self):
        m_csv = os.path.join(SCRATCH, "M.csv")
        result = invoke("inspect-clusters", "--run", self.run_dir, "--ckpt", "last",
                        "--m-csv", m_csv)
        self.assertEqual(result.exit_code, 0, result.output)

        members = json.loads(result.stdout)
        self.assertEqual(set(members), {"0", "1"})
        self.assertEqual(sum(entry["count"] for entry in members.values()),
                         self.stats["n_tags"])
        self.assertEqual(list(pd.read_csv(m_csv).columns), ["item", "intent_0", "intent_1"])


class GradCheckCommandTestCase(TestCase):
    def test_ranking_loss(self):
        result = invoke("grad-check", "--loss", "uv")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(json.loads(result.stdout)[0]["failed"], [])


class SweepHelperTestCase(TestCase):
    """Tests for grid expansion."""

    def test_cartesian_product(self):
        cells = expand_axes(["alpha=0.1,1", "K=2,4"])

        self.assertEqual(len(cells), 4)
        self.assertEqual(cells[0], {"alpha": "0.1", "K": "2"})
        self.assertEqual(cell_name(cells[-1]), "alpha=1_K=4")

    def test_bare_name_uses_grid(self):
        """Does a bare axis name sweep the built-in values?"""

        cells = expand_axes(["delta", "K=4"])

        self.assertEqual([cell["delta"] for cell in cells], [str(v) for v in GRID["delta"]])
        self.assertEqual(len(expand_axes(["alpha", "K"])), len(GRID["alpha"]) * len(GRID["K"]))

    def test_bad_axis(self):
        for axis in ("bogus", "alpha="):
            with self.subTest(axis=axis), self.assertRaises(click.BadParameter):
                expand_axes([axis])
