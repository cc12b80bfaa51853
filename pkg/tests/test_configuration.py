"""
Test cases for loading, validating and building from run configurations
Test cases can be run with:
    nosetests
    coverage report -m
While debugging just these tests it's convenient to use this:
    nosetests --stop tests/test_configuration.py:TestConfig
"""
import os
import logging
import tempfile
import unittest
from avatar.configuration import (DEFAULTS, Config, build_body, build_model, build_skeleton,
                                  build_truth_color, load_config, merge_defaults)
from avatar.fields import AnalyticSdf, ColorNet, ConstantColor, NeuralSdf
from avatar.formats import write_json
from avatar.skeleton import AnalyticSkinning, NeuralSkinning
from avatar.avatar_exception import ConfigValidationError, MissingResource

logging.disable(logging.CRITICAL)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


######################################################################
#  C O N F I G   T E S T   C A S E S
######################################################################
class TestConfig(unittest.TestCase):
    """Test Cases for the configuration document"""

    def test_defaults(self):
        """An empty document gives the defaults"""
        config = Config.from_dict({})
        self.assertEqual(config.scene.skeleton, "humanoid")
        self.assertEqual(config.render.near_samples, 16)
        self.assertEqual(config.train.weights.mask, 3000.0)
        self.assertEqual(config.to_dict()["fields"], DEFAULTS["fields"])

    def test_merge(self):
        """Nested overrides keep their siblings"""
        merged = merge_defaults({"render": {"mode": "surface"}})
        self.assertEqual(merged["render"]["mode"], "surface")
        self.assertEqual(merged["render"]["near_samples"], 16)
        self.assertRaises(ConfigValidationError, merge_defaults, [1, 2])

    def test_schema_errors(self):
        """Unknown keys, wrong types and out-of-range values are refused"""
        for document in ({"render": {"mode": "points"}}, {"train": {"steps": -1}},
                         {"extra": 1}, {"solver": {"n_inits": 2}},
                         {"synth": {"oracle_step": 0.01}}, {"fields": {"sdf_width": "wide"}}):
            self.assertRaises(ConfigValidationError, Config.from_dict, document)

    def test_with_section(self):
        """Replacing values re-runs validation"""
        config = Config.from_dict({})
        changed = config.with_section("render", mode="surface")
        self.assertEqual(changed.render.mode, "surface")
        self.assertEqual(config.render.mode, "volume")
        self.assertRaises(ConfigValidationError, config.with_section, "render", mode="points")
        self.assertRaises(ConfigValidationError, config.with_section, "render", colour=1)

    def test_files(self):
        """Shipped configs load; a missing file is reported"""
        for name in ("default.json", "smoke.json", "sphere.json"):
            load_config(os.path.join(CONFIG_DIR, name))
        self.assertEqual(load_config().seed, 0)
        self.assertRaises(MissingResource, load_config, os.path.join(CONFIG_DIR, "none.json"))
        with tempfile.TemporaryDirectory() as tmp:
            write_json(os.path.join(tmp, "c.json"), {"seed": 9})
            self.assertEqual(load_config(os.path.join(tmp, "c.json")).seed, 9)


######################################################################
#  B U I L D E R   T E S T   C A S E S
######################################################################
class TestBuilders(unittest.TestCase):
    """Test Cases for building scenes and models from a config"""

    def test_presets(self):
        """Named skeletons and explicit bone lists"""
        self.assertEqual(len(build_skeleton(Config.from_dict({}).scene)), 24)
        chain = Config.from_dict({"scene": {"skeleton": "chain", "chain_count": 4}})
        self.assertEqual(len(build_skeleton(chain.scene)), 4)
        bones = [{"parent": -1, "offset": [0, 0, 0],
                  "capsule": {"p0": [0, 0, 0], "p1": [0.5, 0, 0], "radius": 0.1}}]
        custom = Config.from_dict({"scene": {"bones": bones}})
        self.assertEqual(len(build_skeleton(custom.scene)), 1)

    def test_body_and_color(self):
        """Extra spheres join the body; the palette has one albedo per bone"""
        config = Config.from_dict({"scene": {"skeleton": "sphere",
                                             "spheres": [{"center": [0, 1, 0], "radius": 0.2}],
                                             "ambient": 0.5}})
        skel = build_skeleton(config.scene)
        body = build_body(config.scene, skel)
        self.assertIsInstance(body, AnalyticSdf)
        self.assertEqual(len(body.radii), 2)
        color = build_truth_color(config.scene, skel)
        self.assertEqual(color.ambient, 0.5)
        self.assertEqual(color.albedo.shape, (1, 3))

    def test_neural_model(self):
        """Neural fields with one latent per frame"""
        config = Config.from_dict({"scene": {"skeleton": "chain"},
                                   "fields": {"sdf_width": 8, "sdf_depth": 2,
                                              "skinning_width": 8, "skinning_depth": 2,
                                              "color_width": 8, "latent_dim": 3}})
        skel = build_skeleton(config.scene)
        bundle = build_model(config, skel, 4)
        self.assertIsInstance(bundle.sdf, NeuralSdf)
        self.assertIsInstance(bundle.skinning, NeuralSkinning)
        self.assertIsInstance(bundle.color, ColorNet)
        self.assertEqual(bundle.latents.shape, (4, 3))
        self.assertAlmostEqual(bundle.density.b, config.render.b_init)

    def test_deterministic(self):
        """The same seed builds the same weights"""
        config = Config.from_dict({"scene": {"skeleton": "chain"},
                                   "fields": {"sdf_width": 8, "sdf_depth": 2,
                                              "skinning_width": 8, "skinning_depth": 2,
                                              "color_width": 8, "latent_dim": 3}})
        skel = build_skeleton(config.scene)
        a = build_model(config, skel, 1).named_arrays()
        b = build_model(config, skel, 1).named_arrays()
        for key in a:
            self.assertTrue((a[key] == b[key]).all(), key)

    def test_closed_form_models(self):
        """Backward and analytic settings pick the matching pieces"""
        config = Config.from_dict({"scene": {"skeleton": "chain"},
                                   "fields": {"sdf": "analytic", "color": "constant",
                                              "skinning_mode": "backward",
                                              "skinning_width": 8, "skinning_depth": 2}})
        bundle = build_model(config, build_skeleton(config.scene), 1)
        self.assertIsInstance(bundle.sdf, AnalyticSdf)
        self.assertIsInstance(bundle.skinning, AnalyticSkinning)
        self.assertIsInstance(bundle.color, ConstantColor)
        self.assertIsNotNone(bundle.backward)
