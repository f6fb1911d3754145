"""Run configuration tests."""

# run these tests like:
#
#    python -m unittest test_forms.py


import json
import os
import tempfile
from unittest import TestCase

from errors import ConfigError
from forms import (RUN_DEFAULTS, load_run_config, parse_overrides, read_config_file,
                   validate_run_config, write_run_config)


class ValidateTestCase(TestCase):
    """Tests for coercion and validation of flat config mappings."""

    def test_defaults(self):
        config = validate_run_config({})

        self.assertEqual(set(config), set(RUN_DEFAULTS))
        self.assertEqual(config["K"], 4)
        self.assertEqual(config["delta"], 0.7)
        self.assertIs(config["deterministic"], True)

    def test_strings_coerced(self):
        """Do --set style strings come back as ints, floats and bools?"""

        config = validate_run_config({"d": "8", "alpha": "0.5", "no_isa": "true",
                                      "deterministic": "no"})

        self.assertEqual(config["d"], 8)
        self.assertEqual(config["alpha"], 0.5)
        self.assertIs(config["no_isa"], True)
        self.assertIs(config["deterministic"], False)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config({"alpah": 1.0})
        self.assertIn("alpah", ctx.exception.errors)

    def test_K_must_divide_d(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config({"d": 64, "K": 5})
        self.assertIn("K", ctx.exception.errors)

    def test_delta_open_interval(self):
        for delta in (0.0, 1.0):
            with self.subTest(delta=delta), self.assertRaises(ConfigError) as ctx:
                validate_run_config({"delta": delta})
            self.assertIn("delta", ctx.exception.errors)

    def test_bad_backbone(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config({"backbone": "svd"})
        self.assertIn("backbone", ctx.exception.errors)

    def test_neumf_odd_d(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config({"backbone": "neumf", "d": 5, "K": 1})
        self.assertIn("d", ctx.exception.errors)

    def test_not_a_number(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config({"lr": "fast"})
        self.assertIn("lr", ctx.exception.errors)

    def test_data_dir_from_environment(self):
        previous = os.environ.get("IMCAT_DATA_DIR")
        os.environ["IMCAT_DATA_DIR"] = "/srv/bundles/lastfm"
        try:
            self.assertEqual(validate_run_config({})["dataset.bundle"], "/srv/bundles/lastfm")
            self.assertEqual(validate_run_config({"dataset.bundle": "here"})["dataset.bundle"],
                             "here")
        finally:
            if previous is None:
                del os.environ["IMCAT_DATA_DIR"]
            else:
                os.environ["IMCAT_DATA_DIR"] = previous


class FileTestCase(TestCase):
    """Tests for config files and overrides."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "config.json")

    def tearDown(self):
        self.tmp.cleanup()

    def test_override_wins(self):
        with open(self.path, "w") as handle:
            json.dump({"alpha": 2.0, "K": 2}, handle)

        config = load_run_config(self.path, ["alpha=0.1"])
        self.assertEqual(config["alpha"], 0.1)
        self.assertEqual(config["K"], 2)

    def test_written_config_reads_back(self):
        config = validate_run_config({"K": 8, "backbone": "lightgcn"})
        write_run_config(config, self.tmp.name)
        self.assertEqual(validate_run_config(read_config_file(self.path)), config)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            read_config_file(self.path)

    def test_not_an_object(self):
        with open(self.path, "w") as handle:
            handle.write("[1, 2]")
        with self.assertRaises(ConfigError):
            read_config_file(self.path)

    def test_bad_override(self):
        self.assertEqual(parse_overrides(["K = 8"]), {"K": "8"})
        with self.assertRaises(ConfigError):
            parse_overrides(["K"])
