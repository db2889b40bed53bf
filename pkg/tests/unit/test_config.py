#!/usr/bin/env python3

import unittest
import logging
import os
import sys
import tempfile
from pathlib import Path
from unittest import mock

import colorlog
import yaml

# Add project root to Python path
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from blora.common import OUTPUT_ROOT_ENV, ConfigurationError
from blora.config import Config, coerce_override, default_output_directory, load_experiment, parse_seeds
from blora.logs import setup_logging

logger = setup_logging(verbose=True).getChild('test.config')

TEST_CONFIG = Path(__file__).parent.parent / "test_config.yaml"


class TestOverrides(unittest.TestCase):
    """Parsing of +key=value strings and seed lists"""

    def test_coerce_override(self):
        """Scalars, lists and paths are recognised"""
        self.assertEqual(coerce_override("0.5"), 0.5)
        self.assertEqual(coerce_override("12"), 12)
        self.assertIs(coerce_override("true"), True)
        self.assertIsNone(coerce_override("null"))
        self.assertEqual(coerce_override("[1, 2]"), [1, 2])
        self.assertEqual(coerce_override("[]"), [])
        self.assertEqual(coerce_override("page,sgd"), ["page", "sgd"])
        self.assertEqual(coerce_override("./runs/a,b"), "./runs/a,b")
        self.assertEqual(coerce_override(3), 3)

    def test_parse_seeds(self):
        """Ranges are inclusive, duplicates and negatives are rejected"""
        self.assertEqual(parse_seeds("0:3"), (0, 1, 2, 3))
        self.assertEqual(parse_seeds("4,2"), (4, 2))
        self.assertEqual(parse_seeds(7), (7,))
        self.assertEqual(parse_seeds([1, 5]), (1, 5))
        for bad in ([], "", [1, 1], [-1], ["a"]):
            with self.assertRaises(ConfigurationError):
                parse_seeds(bad)


class TestConfig(unittest.TestCase):
    """OmegaConf-backed configuration files"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_load_and_get(self):
        """File values override defaults and dot paths select values"""
        config = Config(str(TEST_CONFIG))
        self.assertEqual(config.get("method.T"), 10)
        self.assertEqual(config.get("problem.kind"), "quadratic-pl")
        self.assertEqual(config.get("method.batch_size"), 1)
        self.assertEqual(config.get("method.missing", "fallback"), "fallback")

    def test_colored_logging_switch(self):
        """logging.colored picks the console formatter"""
        try:
            Config(str(TEST_CONFIG), {"logging.colored": "false"})
            formatter = logging.getLogger("bLoRA").handlers[0].formatter
            self.assertNotIsInstance(formatter, colorlog.ColoredFormatter)
            Config(str(TEST_CONFIG))
            formatter = logging.getLogger("bLoRA").handlers[0].formatter
            self.assertIsInstance(formatter, colorlog.ColoredFormatter)
        finally:
            setup_logging(verbose=True)

    def test_missing_file(self):
        """A missing file raises FileNotFoundError"""
        with self.assertRaises(FileNotFoundError):
            Config(str(self.root / "absent.yaml"))

    def test_invalid_yaml(self):
        """Broken YAML surfaces as a YAML error"""
        path = self.root / "broken.yaml"
        path.write_text("problem: [unclosed\n")
        with self.assertRaises(yaml.YAMLError):
            Config(str(path))

    def test_generate_default_config(self):
        """The generated file holds the defaults with overrides applied"""
        path = self.root / "generated.yaml"
        self.assertTrue(Config.generate_default_config(str(path), {"method.p": "0.2", "method.estimator": "page"}))
        with open(path) as f:
            data = yaml.safe_load(f)
        self.assertEqual(data["method"]["p"], 0.2)
        self.assertEqual(data["method"]["estimator"], "page")
        self.assertEqual(data["problem"]["kind"], "regularized-linreg")
        self.assertTrue(Config.generate_default_config(str(path), {"method.T": "5"}))
        with open(path) as f:
            merged = yaml.safe_load(f)
        self.assertEqual(merged["method"]["p"], 0.2)
        self.assertEqual(merged["method"]["T"], 5)

    def test_save(self):
        """A saved configuration loads back with the same values"""
        path = self.root / "saved.yaml"
        self.assertTrue(Config(str(TEST_CONFIG), {"method.T": "3"}).save(str(path)))
        self.assertEqual(Config(str(path)).get("method.T"), 3)


class TestExperiment(unittest.TestCase):
    """Validated experiment configurations"""

    def test_load_experiment(self):
        """The test configuration gives one GD method on one seed"""
        experiment = load_experiment(str(TEST_CONFIG), out="somewhere")
        self.assertEqual(experiment.problem.kind, "quadratic-pl")
        self.assertEqual(len(experiment.methods), 1)
        method = experiment.methods[0]
        self.assertEqual(method.name, "gd-p0.5")
        self.assertEqual(method.T, 10)
        self.assertEqual(experiment.seeds, (0,))
        self.assertEqual(experiment.output_directory, "somewhere")
        left, right = method.sketch_specs((2, 2))
        self.assertEqual((left.distribution, left.rank), ("coordinate-subset", 2))
        self.assertEqual(right.side, "right")

    def test_command_line_precedence(self):
        """Seeds, threshold and jobs from the command line win over the file"""
        experiment = load_experiment(str(TEST_CONFIG), {"seeds": "[3, 4]"}, seeds="0:2", stop_grad_sq=1e-6, jobs=2)
        self.assertEqual(experiment.seeds, (0, 1, 2))
        self.assertEqual(experiment.stop_grad_sq, 1e-6)
        self.assertEqual(experiment.jobs, 2)
        self.assertEqual(load_experiment(str(TEST_CONFIG), {"seeds": "[3, 4]"}).seeds, (3, 4))

    def test_default_output_directory(self):
        """Outputs default to the environment root, then runs/"""
        with mock.patch.dict(os.environ, {OUTPUT_ROOT_ENV: "/tmp/blora-out"}):
            self.assertEqual(default_output_directory("exp/fine-tune.yaml"), str(Path("/tmp/blora-out/fine-tune")))
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(default_output_directory("fine-tune.yaml"), str(Path("runs/fine-tune")))
            self.assertEqual(default_output_directory(None), str(Path("runs/experiment")))

    def test_comparison_methods(self):
        """Comparison entries are merged over the base method"""
        overrides = {"comparison": '[{"estimator": "page", "q": 0.5}, {"estimator": "sgd", "name": "plain"}]'}
        experiment = load_experiment(str(TEST_CONFIG), overrides)
        names = [m.name for m in experiment.methods]
        self.assertEqual(names, ["page-p0.5", "plain"])
        self.assertEqual(experiment.methods[0].q, 0.5)
        self.assertEqual(experiment.methods[1].T, 10)

    def test_duplicate_method_names(self):
        """Two comparison entries with the same name are rejected"""
        overrides = {"comparison": '[{"estimator": "sgd"}, {"estimator": "sgd"}]'}
        with self.assertRaises(ConfigurationError) as ctx:
            load_experiment(str(TEST_CONFIG), overrides)
        self.assertEqual(ctx.exception.field, "comparison[1].name")

    def test_invalid_values_name_the_field(self):
        """Errors carry the dotted name of the offending field"""
        cases = {
            "method.p": ("1.5", "method.p"),
            "method.estimator": ("adam", "method.estimator"),
            "problem.quadratic-pl.mu": ("2.0", "problem.quadratic-pl.mu"),
            "method.sketch.left.distribution": ("rademacher", "method.sketch.left.distribution"),
        }
        for key, (value, field) in cases.items():
            with self.assertRaises(ConfigurationError) as ctx:
                load_experiment(str(TEST_CONFIG), {key: value})
            self.assertEqual(ctx.exception.field, field, key)
        with self.assertRaises(ConfigurationError):
            load_experiment(str(TEST_CONFIG), {"problem.kind": "logistic"})
        with self.assertRaises(ConfigurationError):
            load_experiment(str(TEST_CONFIG), {"method.momentum": "0.9"})
        with self.assertRaises(ConfigurationError):
            load_experiment(str(TEST_CONFIG), {"output.jobs": "0"})

    def test_nonsmooth_uses_subgradient(self):
        """A non-smooth problem turns the default estimator into the subgradient method"""
        experiment = load_experiment(str(TEST_CONFIG), {"problem.kind": "nonsmooth-l1"})
        self.assertEqual(experiment.methods[0].estimator, "subgradient")

    def test_federated_setup(self):
        """Clients are split by the run seed and get default compressors"""
        experiment = load_experiment(str(TEST_CONFIG), {"method.estimator": "marina", "method.clients": "2",
                                                        "method.q": "0.5"})
        method = experiment.methods[0]
        self.assertEqual(method.name, "marina-p0.5-M2")
        problem = experiment.problem.build()
        setup = method.federated_setup(problem, 0)
        self.assertEqual(len(setup.clients), 2)
        self.assertEqual(setup.compressors[0].omega, 3.0)
        self.assertEqual(setup.q, 0.5)
        with self.assertRaises(ConfigurationError):
            load_experiment(str(TEST_CONFIG), {"method.estimator": "marina"})

    def test_driver_config(self):
        """Driver settings follow the method section"""
        experiment = load_experiment(str(TEST_CONFIG), {"method.estimator": "page", "method.q": "0.25"})
        config = experiment.methods[0].driver_config((2, 2), seed=4, stop_grad_sq=1e-9)
        self.assertEqual(config.seed, 4)
        self.assertEqual(config.estimator_params["q"], 0.25)
        self.assertEqual(config.stop_grad_sq, 1e-9)
        self.assertEqual(config.stepsize.policy, "theorem")


if __name__ == "__main__":
    unittest.main()
