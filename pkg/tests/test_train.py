"""
Test cases for the model bundle, training steps, pre-fits and pose refinement
Test cases can be run with:
    nosetests
    coverage report -m
While debugging just these tests it's convenient to use this:
    nosetests --stop tests/test_train.py:TestTrainer
"""
import os
import copy
import logging
import tempfile
import unittest
import numpy as np
from avatar.adam import Optimizer
from avatar.cli import cmd_synth
from avatar.configuration import Config, build_model, build_skeleton
from avatar.formats import Dataset, Frame, JsonLinesWriter, load_dataset, read_json_lines
from avatar.losses import loss_skinning, sample_surface
from avatar.render import DensityParams
from avatar.skeleton import AnalyticSkinning, Pose
from avatar.train import (TrainConfig, Trainer, augment_views, evaluate_view, held_out_view,
                          prefit_sdf, prefit_skinning, refine_pose, sample_training_rays,
                          train_step, training_views)
from avatar.avatar_exception import InvalidArgument
from .factories import PoseFactory

logging.disable(logging.CRITICAL)

TINY = {
    "seed": 3,
    "scene": {"skeleton": "chain", "chain_count": 2},
    "fields": {"sdf_width": 16, "sdf_depth": 3, "skinning_width": 8, "skinning_depth": 2,
               "color_width": 16, "latent_dim": 4},
    "render": {"near_samples": 4, "far_samples": 4, "uniform_samples": 8, "chunk_size": 64},
    "train": {"steps": 3, "fg_rays": 8, "bg_rays": 8, "reg_samples": 16, "refine_steps": 3},
    "synth": {"frames": 2, "cameras": 2, "width": 12, "height": 12, "radius": 2.5,
              "fov": 50.0, "amplitude": 0.3},
}

ANALYTIC_FIELDS = {"sdf": "analytic", "skinning": "analytic", "color": "analytic",
                   "latent_dim": 0, "pose_conditioning": False}


######################################################################
#  C O N F I G   T E S T   C A S E S
######################################################################
class TestTrainConfig(unittest.TestCase):
    """Test Cases for training settings"""

    def test_validation(self):
        """Counts, rates and intervals are checked"""
        self.assertRaises(InvalidArgument, TrainConfig, fg_rays=0)
        self.assertRaises(InvalidArgument, TrainConfig, pose_noise=-0.1)
        self.assertRaises(InvalidArgument, TrainConfig, lr=-1.0)
        self.assertRaises(InvalidArgument, TrainConfig, refine_patience=0)
        self.assertEqual(TrainConfig().serialize_to_dict()["weights"]["color"], 30.0)


######################################################################
#  M O D E L   B U N D L E   T E S T   C A S E S
######################################################################
class TestFieldBundle(unittest.TestCase):
    """Test Cases for the learned pieces of one subject"""

    def setUp(self):
        self.settings = Config.from_dict(TINY)
        self.skel = build_skeleton(self.settings.scene)
        self.bundle = build_model(self.settings, self.skel, 2)

    def test_arrays(self):
        """Every learned array has a name"""
        arrays = self.bundle.named_arrays()
        for key in ("sdf.0.weight", "density.log_b", "mask.log_alpha", "latents"):
            self.assertIn(key, arrays)
        self.assertEqual(arrays["latents"].shape, (2, 4))

    def test_load_arrays(self):
        """Saved values land in the live arrays; foreign arrays are refused"""
        self.bundle.load_arrays({"density.log_b": np.array([0.0]), "adam.sdf.step": np.zeros(1)})
        self.assertAlmostEqual(self.bundle.density.b, 1.0)
        self.assertRaises(InvalidArgument, self.bundle.load_arrays, {"other": np.zeros(1)})
        self.assertRaises(InvalidArgument, self.bundle.load_arrays, {"latents": np.zeros((3, 4))})

    def test_parameter_groups(self):
        """SDF, other fields and latents learn at their own rates"""
        cfg = TrainConfig(sdf_lr=1e-5, lr=1e-4, latent_lr=1e-3)
        optimizer = Optimizer(self.bundle.parameter_groups(cfg))
        self.assertEqual(optimizer.group("sdf").state.lr, 1e-5)
        self.assertEqual(optimizer.group("latents").state.lr, 1e-3)
        self.assertIn("density.log_b", optimizer.group("fields").params)

    def test_latent_weight_decay(self):
        """Only the latents decay, shrinking by lr times the decay on a zero gradient"""
        cfg = TrainConfig(latent_lr=1e-3)
        optimizer = Optimizer(self.bundle.parameter_groups(cfg))
        self.assertEqual(optimizer.group("latents").state.weight_decay, 0.05)
        self.assertEqual(optimizer.group("sdf").state.weight_decay, 0.0)
        self.assertEqual(optimizer.group("fields").state.weight_decay, 0.0)
        self.bundle.latents[...] = 1.0
        before = self.bundle.latents.copy()
        optimizer.step({})
        np.testing.assert_allclose(self.bundle.latents, before * (1.0 - 1e-3 * 0.05), rtol=1e-12)
        self.assertRaises(InvalidArgument, TrainConfig, latent_weight_decay=-0.1)

    def test_conditioning_noise(self):
        """Pose noise perturbs rotations and leaves the scales alone"""
        pose = PoseFactory(n_bones=2)
        noisy = self.bundle.conditioning(pose, np.random.default_rng(0), 0.1)
        clean = self.bundle.conditioning(pose)
        self.assertFalse(np.allclose(noisy[:6], clean[:6]))
        np.testing.assert_array_equal(noisy[6:], clean[6:])

    def test_latent_rows(self):
        """Frames past the last latent reuse the last one"""
        np.testing.assert_array_equal(self.bundle.latent(7).value, self.bundle.latents[1])

    def test_no_conditioning(self):
        """Unconditioned models take no pose vector and no latent"""
        settings = Config.from_dict({**TINY, "fields": ANALYTIC_FIELDS})
        bundle = build_model(settings, self.skel, 1)
        self.assertIsNone(bundle.conditioning(Pose.rest(2)))
        self.assertIsNone(bundle.latent(0))


######################################################################
#  V I E W   A U G M E N T A T I O N   T E S T   C A S E S
######################################################################
class TestAugmentViews(unittest.TestCase):
    """Test Cases for perturbing view directions"""

    def setUp(self):
        self.view = np.tile([0.0, 0.0, 1.0], (50, 1))
        self.normals = np.tile([0.0, 0.0, -1.0], (50, 1))

    def test_stays_in_front(self):
        """Augmented directions are unit length and face the surface"""
        out = augment_views(self.view, self.normals, np.random.default_rng(1), 45.0)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.ones(50))
        self.assertTrue(np.all(np.sum(out * -self.normals, axis=1) >= 0.0))
        self.assertFalse(np.allclose(out, self.view))

    def test_zero_spread(self):
        """No spread leaves the directions alone"""
        out = augment_views(self.view, self.normals, np.random.default_rng(1), 0.0)
        np.testing.assert_array_equal(out, self.view)

    def test_fallback(self):
        """Rows that never pass keep a facing input or look along -n"""
        normals = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
        out = augment_views(self.view[:2], normals, np.random.default_rng(1), 45.0, max_rounds=0)
        np.testing.assert_allclose(out, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])


######################################################################
#  T R A I N I N G   T E S T   C A S E S
######################################################################
class TestTrainer(unittest.TestCase):
    """Test Cases for steps, checkpoints and pre-fits on a tiny synthetic set"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.settings = Config.from_dict(TINY)
        cmd_synth(cls.settings, os.path.join(cls.tmp.name, "data"))
        cls.dataset = load_dataset(os.path.join(cls.tmp.name, "data"))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def setUp(self):
        self.bundle = build_model(self.settings, self.dataset.skeleton, len(self.dataset))

    def make_trainer(self, bundle=None, seed=5):
        return Trainer(self.dataset, bundle or self.bundle, self.settings.train,
                       self.settings.render, self.settings.solver, seed)

    def test_dataset(self):
        """The synthetic set has every frame and view"""
        self.assertEqual(len(self.dataset), 2)
        self.assertEqual(len(self.dataset.frames[0].views), 2)
        self.assertTrue(self.dataset.frames[0].views[0].image.mask.any())

    def test_training_rays(self):
        """Foreground and background rays are drawn without replacement"""
        batch = sample_training_rays(self.dataset, 0, self.bundle, self.settings.train,
                                     np.random.default_rng(0))
        self.assertLessEqual(len(batch.rays), 16)
        self.assertEqual(batch.rgb.shape, (len(batch.rays), 3))
        self.assertEqual(int(batch.occupancy.sum()), int(np.sum(batch.occupancy == 1.0)))
        self.assertLessEqual(int(batch.occupancy.sum()), 8)

    def test_training_rays_skip_held_out_view(self):
        """The held-out view never contributes training rays"""
        frame_index, held = held_out_view(self.dataset)
        kept = [view for view in self.dataset.frames[frame_index].views if view is not held]
        self.assertEqual(len(kept), 1)
        cfg = TrainConfig(fg_rays=10000, bg_rays=10000)
        batch = sample_training_rays(self.dataset, frame_index, self.bundle, cfg,
                                     np.random.default_rng(0))
        self.assertEqual(len(batch.rays), 12 * 12)
        np.testing.assert_array_equal(batch.rays.origins,
                                      np.tile(kept[0].camera.center, (len(batch.rays), 1)))
        self.assertEqual(len(training_views(self.dataset, 0)), 2)

    def test_single_view_dataset_trains_on_it(self):
        """A dataset with one view keeps it for training"""
        frame = self.dataset.frames[0]
        single = Dataset([Frame(0, frame.pose, frame.views[:1])], self.dataset.skeleton)
        self.assertEqual(training_views(single, 0), frame.views[:1])

    def test_one_step(self):
        """A step reports every weighted term and updates the model"""
        optimizer = Optimizer(self.bundle.parameter_groups(self.settings.train))
        before = self.bundle.density.log_b.copy()
        metrics = train_step(self.dataset, self.bundle, optimizer, self.settings.train,
                             self.settings.render, self.settings.solver,
                             np.random.default_rng(2))
        for key in ("color", "eikonal", "offsurface", "inside", "skinning", "loss", "b"):
            self.assertIn(key, metrics)
        self.assertNotIn("mask", metrics)
        self.assertTrue(np.isfinite(metrics["loss"]))
        self.assertFalse(metrics["skipped"])
        self.assertFalse(np.array_equal(before, self.bundle.density.log_b))

    def test_run_writes_log_and_checkpoint(self):
        """A run logs each step and checkpoints at the end"""
        log_path = os.path.join(self.tmp.name, "log.jsonl")
        ckpt_path = os.path.join(self.tmp.name, "run.ckpt")
        with JsonLinesWriter(log_path) as log:
            history = self.make_trainer().run(2, log, ckpt_path)
        self.assertEqual([m["step"] for m in history], [1, 2])
        self.assertEqual(len(read_json_lines(log_path)), 2)
        self.assertTrue(os.path.exists(ckpt_path))

    def test_resume_is_exact(self):
        """A restored trainer takes the same next step as the original"""
        first = self.make_trainer()
        first.run(1)
        header, arrays = first.state()
        header = copy.deepcopy(header)
        arrays = {key: value.copy() for key, value in arrays.items()}
        fresh = build_model(self.settings, self.dataset.skeleton, len(self.dataset),
                            np.random.default_rng(99))
        second = self.make_trainer(fresh, seed=99)
        second.restore(header, arrays)
        self.assertEqual(second.step, 1)
        a, b = first.run_step(), second.run_step()
        self.assertEqual(a["frame"], b["frame"])
        self.assertEqual(a["loss"], b["loss"])

    def test_prefits(self):
        """Both pre-fits reduce their regression losses"""
        rng = np.random.default_rng(4)
        history = prefit_sdf(self.bundle, 30, 1e-3, rng, samples=128)
        self.assertEqual(len(history), 30)
        self.assertLess(np.mean(history[-5:]), np.mean(history[:5]))
        history = prefit_skinning(self.bundle, 30, 1e-2, rng, samples=128)
        self.assertLess(np.mean(history[-5:]), np.mean(history[:5]))

    def test_evaluate_view(self):
        """The held-out view is the last camera of the last frame"""
        frame_index, view = held_out_view(self.dataset)
        self.assertEqual((frame_index, view.camera_index), (1, 1))
        value, image = evaluate_view(self.bundle, self.dataset, self.settings.render,
                                     self.settings.solver)
        self.assertEqual(image.rgb.shape, (12, 12, 3))
        self.assertFalse(np.isnan(value))


######################################################################
#  L E A R N I N G   T E S T   C A S E S
######################################################################
class TestLearning(unittest.TestCase):
    """Test Cases for training progress on a one-frame synthetic set"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.settings = Config.from_dict({**TINY,
                                         "train": {**TINY["train"], "sdf_lr": 1e-3, "lr": 1e-3},
                                         "synth": {**TINY["synth"], "frames": 1}})
        cmd_synth(cls.settings, cls.tmp.name)
        cls.dataset = load_dataset(cls.tmp.name)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_loss_decreases(self):
        """Fifty steps from a fresh model lower the training loss"""
        bundle = build_model(self.settings, self.dataset.skeleton, len(self.dataset))
        trainer = Trainer(self.dataset, bundle, self.settings.train, self.settings.render,
                          self.settings.solver, 0)
        losses = [metrics["loss"] for metrics in trainer.run(50)]
        self.assertEqual(len(losses), 50)
        self.assertNotIn(None, losses)
        self.assertLess(np.mean(losses[-10:]), np.mean(losses[:10]))

    def test_skinning_prefit_accuracy(self):
        """The pre-fit skinning field is within 0.05 mean L1 of the analytic weights"""
        settings = Config.from_dict({**TINY, "fields": {**TINY["fields"], "skinning_width": 32,
                                                        "skinning_depth": 3}})
        bundle = build_model(settings, self.dataset.skeleton, 1)
        prefit_skinning(bundle, 800, 3e-3, np.random.default_rng(7), samples=512)
        points = sample_surface(bundle.body, np.random.default_rng(8), 2000)
        target = AnalyticSkinning(bundle.skel).weights(points)
        error = float(np.reshape(loss_skinning(bundle.skinning, points, target).value, ()))
        self.assertLess(error, 0.05)


######################################################################
#  P O S E   R E F I N E M E N T   T E S T   C A S E S
######################################################################
class TestRefinePose(unittest.TestCase):
    """Test Cases for fitting joint rotations with frozen fields"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.settings = Config.from_dict({**TINY, "fields": ANALYTIC_FIELDS})
        cmd_synth(cls.settings, cls.tmp.name)
        cls.dataset = load_dataset(cls.tmp.name)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_refine(self):
        """The root stays put and the best loss is reported"""
        bundle = build_model(self.settings, self.dataset.skeleton, len(self.dataset))
        frame = self.dataset.frames[0]
        result = refine_pose(bundle, frame, 0, frame.pose, self.settings.train,
                             self.settings.render, self.settings.solver, pixels=64)
        self.assertGreaterEqual(len(result.losses), 1)
        self.assertLessEqual(len(result.losses), 3)
        self.assertEqual(result.best_loss, min(result.losses))
        np.testing.assert_array_equal(result.pose.rotations[0], frame.pose.rotations[0])

    def test_recovers_perturbed_joint(self):
        """Refinement moves a bent joint back toward the pose the images show"""
        bundle = build_model(self.settings, self.dataset.skeleton, len(self.dataset))
        bundle.density = DensityParams.from_b(0.01)
        frame = self.dataset.frames[0]
        truth = frame.pose.rotations
        rotations = truth.copy()
        rotations[1, 2] += 0.1
        cfg = TrainConfig(refine_steps=30, refine_lr=1e-2, refine_patience=10)
        result = refine_pose(bundle, frame, 0, frame.pose.with_rotations(rotations), cfg,
                             self.settings.render, self.settings.solver)
        self.assertLess(result.best_loss, result.losses[0])
        self.assertLess(abs(result.pose.rotations[1, 2] - truth[1, 2]), 0.1)
        np.testing.assert_array_equal(result.pose.rotations[0], truth[0])
