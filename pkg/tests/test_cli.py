"""
Test cases for the avatar command line
Test cases can be run with:
    nosetests
    coverage report -m
While debugging just these tests it's convenient to use this:
    nosetests --stop tests/test_cli.py:TestPipeline
"""
import os
import csv
import json
import logging
import tempfile
import unittest
from click.testing import CliRunner
from avatar import status
from avatar.cli import (ABLATION_COLUMNS, ablation_variants, cli, cmd_ablate, cmd_bench,
                        handle_error)
from avatar.configuration import Config
from avatar.formats import write_json
from avatar.skeleton import Pose
from avatar.avatar_exception import (AvatarException, ConfigValidationError, EmptySurface,
                                     InvalidArgument, MissingResource, NumericalFailure)

logging.disable(logging.CRITICAL)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SPHERE_CONFIG = os.path.join(ROOT, "configs", "sphere.json")


######################################################################
#  E R R O R   H A N D L E R   T E S T   C A S E S
######################################################################
class TestErrorHandlers(unittest.TestCase):
    """Test Cases for mapping exceptions to exit codes"""

    def test_validation_codes(self):
        """Caller mistakes exit 2"""
        for error in (InvalidArgument("2 VALIDATION: x"), ConfigValidationError("2 VALIDATION: x"),
                      MissingResource("2 VALIDATION: x"), FileNotFoundError("x")):
            self.assertEqual(handle_error(error), status.EXIT_2_VALIDATION)

    def test_numerical_codes(self):
        """Solver and training failures exit 3"""
        for error in (NumericalFailure("3 NUMERICAL: x"), EmptySurface("3 NUMERICAL: x"),
                      AvatarException("3 NUMERICAL: x")):
            self.assertEqual(handle_error(error), status.EXIT_3_NUMERICAL)

    def test_unhandled(self):
        """Foreign exceptions are not swallowed"""
        self.assertIsNone(handle_error(KeyError("x")))


######################################################################
#  U S A G E   T E S T   C A S E S
######################################################################
class TestUsage(unittest.TestCase):
    """Test Cases for arguments and configs"""

    def setUp(self):
        self.runner = CliRunner()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def test_help(self):
        """Help lists every command"""
        result = self.runner.invoke(cli, ["--help"])
        self.assertEqual(result.exit_code, status.EXIT_0_OK)
        for name in ("synth", "train", "render", "mesh", "bench", "check"):
            self.assertIn(name, result.output)

    def test_usage_errors(self):
        """Unknown commands and malformed options exit 1"""
        result = self.runner.invoke(cli, ["--config", SPHERE_CONFIG, "dance"])
        self.assertEqual(result.exit_code, status.EXIT_1_USAGE)
        result = self.runner.invoke(cli, ["--config", SPHERE_CONFIG, "synth", self.tmp,
                                          "--size", "eight"])
        self.assertEqual(result.exit_code, status.EXIT_1_USAGE)
        result = self.runner.invoke(cli, ["--config", SPHERE_CONFIG, "bench",
                                          "--ablate-steps", "2"])
        self.assertEqual(result.exit_code, status.EXIT_1_USAGE)

    def test_missing_config(self):
        """A config that does not exist exits 2"""
        result = self.runner.invoke(cli, ["--config", os.path.join(self.tmp, "none.json"),
                                          "check", "--only", "eikonal"])
        self.assertEqual(result.exit_code, status.EXIT_2_VALIDATION)

    def test_invalid_config(self):
        """A config that breaks the schema exits 2"""
        path = os.path.join(self.tmp, "bad.json")
        write_json(path, {"render": {"mode": "points"}})
        result = self.runner.invoke(cli, ["--config", path, "check", "--only", "eikonal"])
        self.assertEqual(result.exit_code, status.EXIT_2_VALIDATION)

    def test_missing_dataset(self):
        """Training on a missing dataset exits 2"""
        result = self.runner.invoke(cli, ["--config", SPHERE_CONFIG, "train",
                                          os.path.join(self.tmp, "nowhere"),
                                          os.path.join(self.tmp, "run")])
        self.assertEqual(result.exit_code, status.EXIT_2_VALIDATION)

    def test_check(self):
        """Selected suites run and the report is printed"""
        out = os.path.join(self.tmp, "report.json")
        result = self.runner.invoke(cli, ["--config", SPHERE_CONFIG, "check", "--only", "eikonal",
                                          "--only", "simplex", "--out", out])
        self.assertEqual(result.exit_code, status.EXIT_0_OK)
        report = json.loads(result.output)
        self.assertTrue(report["passed"])
        self.assertEqual(len(report["suites"]), 2)
        self.assertTrue(os.path.exists(out))

    def test_bench(self):
        """One CSV row per requested strategy"""
        out = os.path.join(self.tmp, "bench.csv")
        result = self.runner.invoke(cli, ["--config", SPHERE_CONFIG, "bench", "--rays", "20",
                                          "--poses", "2", "--strategy", "joint",
                                          "--strategy", "secant", "--out", out])
        self.assertEqual(result.exit_code, status.EXIT_0_OK)
        with open(out, newline="") as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual([row["strategy"] for row in rows], ["joint", "secant"])
        self.assertEqual(rows[0]["rays"], "20")
        self.assertEqual(float(rows[0]["agreement"]), 1.0)


######################################################################
#  P I P E L I N E   T E S T   C A S E S
######################################################################
class TestPipeline(unittest.TestCase):
    """Test Cases for synth, train, render and mesh on the analytic sphere"""

    @classmethod
    def setUpClass(cls):
        cls.runner = CliRunner()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = cls._tmp.name
        cls.data = os.path.join(cls.tmp, "data")
        cls.run_dir = os.path.join(cls.tmp, "run")
        cls.synth = cls.invoke("synth", cls.data, "--size", "8x8")
        cls.train = cls.invoke("train", cls.data, cls.run_dir, "--steps", "2")
        cls.checkpoint = os.path.join(cls.run_dir, "checkpoint.npz")

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    @classmethod
    def invoke(cls, *args):
        return cls.runner.invoke(cli, ["--config", SPHERE_CONFIG] + list(args))

    def test_synth(self):
        """The dataset has one frame seen by two cameras"""
        self.assertEqual(self.synth.exit_code, status.EXIT_0_OK, self.synth.output)
        self.assertEqual(json.loads(self.synth.output), {"dataset": self.data, "frames": 1,
                                                         "views": 2})
        self.assertTrue(os.path.exists(os.path.join(self.data, "manifest.json")))
        self.assertTrue(os.path.exists(os.path.join(self.data, "images", "f000_c01.ppm")))

    def test_train(self):
        """Training writes a checkpoint, a log and metrics"""
        self.assertEqual(self.train.exit_code, status.EXIT_0_OK, self.train.output)
        metrics = json.loads(self.train.output)
        self.assertEqual(metrics["step"], 2)
        self.assertIn("held_out_psnr", metrics)
        self.assertTrue(os.path.exists(self.checkpoint))
        with open(os.path.join(self.run_dir, "train.jsonl")) as handle:
            self.assertEqual(len(handle.readlines()), 2)

    def test_resume(self):
        """Resuming continues the step count and appends to the log"""
        run_dir = os.path.join(self.tmp, "resumed")
        self.assertEqual(self.invoke("train", self.data, run_dir, "--steps", "1",
                                     "--no-eval").exit_code, status.EXIT_0_OK)
        result = self.invoke("train", self.data, run_dir, "--steps", "2", "--resume", "--no-eval")
        self.assertEqual(result.exit_code, status.EXIT_0_OK, result.output)
        self.assertEqual(json.loads(result.output)["step"], 2)
        with open(os.path.join(run_dir, "train.jsonl")) as handle:
            self.assertEqual(len(handle.readlines()), 2)

    def test_render_training_view(self):
        """Rendering a dataset view reports PSNR and IoU"""
        out = os.path.join(self.tmp, "view.ppm")
        result = self.invoke("render", self.checkpoint, "--dataset", self.data, "--camera", "1",
                             "--out", out)
        self.assertEqual(result.exit_code, status.EXIT_0_OK, result.output)
        summary = json.loads(result.output)
        self.assertIn("psnr", summary)
        self.assertIn("silhouette_iou", summary)
        self.assertTrue(os.path.exists(os.path.join(self.tmp, "view.pgm")))

    def test_render_novel_pose(self):
        """A pose file renders without a reference image"""
        pose_path = os.path.join(self.tmp, "pose.json")
        write_json(pose_path, Pose.rest(1).serialize_to_dict())
        out = os.path.join(self.tmp, "novel.ppm")
        result = self.invoke("render", self.checkpoint, "--pose", pose_path, "--size", "6x4",
                             "--mode", "surface", "--out", out)
        self.assertEqual(result.exit_code, status.EXIT_0_OK, result.output)
        summary = json.loads(result.output)
        self.assertNotIn("psnr", summary)
        self.assertEqual(summary["mode"], "surface")

    def test_render_errors(self):
        """Wrong joint counts and missing frames exit 2"""
        pose_path = os.path.join(self.tmp, "big_pose.json")
        write_json(pose_path, Pose.rest(3).serialize_to_dict())
        result = self.invoke("render", self.checkpoint, "--pose", pose_path,
                             "--out", os.path.join(self.tmp, "x.ppm"))
        self.assertEqual(result.exit_code, status.EXIT_2_VALIDATION)
        result = self.invoke("render", self.checkpoint, "--dataset", self.data, "--frame", "4",
                             "--out", os.path.join(self.tmp, "y.ppm"))
        self.assertEqual(result.exit_code, status.EXIT_2_VALIDATION)
        result = self.invoke("render", os.path.join(self.tmp, "none.npz"))
        self.assertEqual(result.exit_code, status.EXIT_2_VALIDATION)

    def test_mesh(self):
        """The analytic sphere meshes close to its reference"""
        out = os.path.join(self.tmp, "sphere.obj")
        result = self.invoke("mesh", self.checkpoint, "--resolution", "16", "--samples", "5000",
                             "--out", out)
        self.assertEqual(result.exit_code, status.EXIT_0_OK, result.output)
        summary = json.loads(result.output)
        self.assertLess(summary["chamfer_l2"], 1e-3)
        self.assertTrue(os.path.exists(out))
        self.assertTrue(os.path.exists(os.path.join(self.tmp, "sphere.json")))

    def test_ablation_trains_each_variant(self):
        """Every ablation variant gets its own short training run"""
        settings = Config.from_dict({"scene": {"skeleton": "sphere"},
                                     "fields": {"sdf": "analytic", "skinning": "analytic",
                                                "color": "analytic", "latent_dim": 0,
                                                "pose_conditioning": False},
                                     "train": {"fg_rays": 16, "bg_rays": 16,
                                               "reg_samples": 16}})
        rows = cmd_ablate(settings, self.data, steps=1)
        self.assertEqual([row["variant"] for row in rows], list(ablation_variants(settings)))
        for row in rows:
            self.assertEqual(row["steps"], 1, row["variant"])
            self.assertIn("psnr", row)
            self.assertGreaterEqual(row["silhouette_iou"], 0.0)
        self.assertRaises(InvalidArgument, cmd_ablate, settings, self.data, 1, 1, ["sharp"])

    def test_bench_ablation_csv(self):
        """Bench with a dataset writes the ablation table next to the benchmark"""
        out = os.path.join(self.tmp, "bench.csv")
        result = self.invoke("bench", "--rays", "10", "--poses", "1", "--strategy", "joint",
                             "--dataset", self.data, "--ablate-steps", "1",
                             "--variant", "hybrid", "--variant", "surface", "--out", out)
        self.assertEqual(result.exit_code, status.EXIT_0_OK, result.output)
        with open(os.path.join(self.tmp, "bench_ablation.csv"), newline="") as handle:
            reader = csv.DictReader(handle)
            self.assertEqual(tuple(reader.fieldnames), ABLATION_COLUMNS)
            rows = list(reader)
        self.assertEqual([row["variant"] for row in rows], ["hybrid", "surface"])
        self.assertEqual(rows[0]["steps"], "1")


######################################################################
#  B E N C H   T E S T   C A S E S
######################################################################
class TestBench(unittest.TestCase):
    """Test Cases for comparing root-finding strategies"""

    def _rows(self, skeleton):
        settings = Config.from_dict({"scene": {"skeleton": skeleton},
                                     "solver": {"eps": 1e-9}})
        rows = cmd_bench(settings, n_rays=120, strategies=("joint", "secant"), n_poses=2)
        return {row["strategy"]: row for row in rows}

    def test_joint_converges_in_fewer_iterations(self):
        """At a tight tolerance the joint solver needs fewer iterations than secant search"""
        for skeleton in ("chain", "humanoid"):
            rows = self._rows(skeleton)
            self.assertGreater(rows["joint"]["converged_fraction"], 0.0, skeleton)
            self.assertGreater(rows["secant"]["converged_fraction"], 0.0, skeleton)
            self.assertLess(rows["joint"]["median_iterations"],
                            rows["secant"]["median_iterations"], skeleton)

    def test_alternation_agrees_over_random_poses(self):
        """Joint roots match alternation roots on mutually converged rays over twenty poses"""
        settings = Config.from_dict({"scene": {"skeleton": "chain"}})
        rows = cmd_bench(settings, n_rays=1000, strategies=("joint", "alternation"), n_poses=20)
        alternation = {row["strategy"]: row for row in rows}["alternation"]
        self.assertGreater(alternation["converged_fraction"], 0.0)
        self.assertGreaterEqual(alternation["agreement"], 0.99)
