"""
Test cases for canonical SDFs, normals and color fields
Test cases can be run with:
    nosetests
    coverage report -m
While debugging just these tests it's convenient to use this:
    nosetests --stop tests/test_fields.py:TestNeuralSdf
"""
import math
import logging
import unittest
import numpy as np
from avatar.autodiff import Tape, Tensor
from avatar.fields import (AMBIENT, LIGHT_DIRECTION, AnalyticColor, AnalyticSdf, ColorNet,
                           ConstantColor, MappingNetwork, NeuralSdf, bind_latent, color_eval,
                           normal_observation, normals_observation, sdf_eval, sdf_grad,
                           smooth_min)
from avatar.geom import RigidTransform
from avatar.skeleton import AnalyticSkinning, BoneTransforms, capsule_chain, sphere_body
from avatar.avatar_exception import DegenerateBlend, InvalidArgument, ShapeMismatch
from .factories import SkeletonFactory

logging.disable(logging.CRITICAL)

STEP = 1e-6


def finite_difference_gradient(values, x):
    """Central differences of a batched scalar field"""
    grads = np.zeros_like(x)
    for k in range(3):
        offset = np.zeros(3)
        offset[k] = STEP
        grads[:, k] = (values(x + offset) - values(x - offset)) / (2 * STEP)
    return grads


######################################################################
#  A N A L Y T I C   S D F   T E S T   C A S E S
######################################################################
class TestAnalyticSdf(unittest.TestCase):
    """Test Cases for the capsule-union SDF"""

    def test_sphere(self):
        """Distance and gradient of a sphere"""
        sdf = AnalyticSdf.sphere(radius=0.5)
        self.assertAlmostEqual(float(sdf.values(np.array([0.0, 0.0, 2.0]))[0]), 1.5)
        np.testing.assert_allclose(sdf_grad(sdf, np.array([0.0, 0.0, 2.0])), [0.0, 0.0, 1.0])

    def test_smooth_min(self):
        """Far-apart values pass through; equal values dip by k / 4"""
        value, h = smooth_min(np.array([0.0, 1.0]), np.array([1.0, 1.0]), 0.1)
        self.assertAlmostEqual(value[0], 0.0)
        self.assertEqual(h[0], 1.0)
        self.assertAlmostEqual(value[1], 1.0 - 0.025)

    def test_taped_matches_numpy(self):
        """Both evaluations of the blend agree"""
        sdf = AnalyticSdf.from_skeleton(SkeletonFactory(), spheres=[((0.0, 0.3, 0.0), 0.1)])
        points = np.random.default_rng(0).uniform(-1.0, 1.0, (32, 3))
        np.testing.assert_allclose(sdf_eval(sdf, points).s.value, sdf.values(points), atol=1e-12)
        self.assertEqual(sdf.primitive_distances(points).shape, (32, 4))

    def test_gradient(self):
        """Blended gradients match finite differences"""
        sdf = AnalyticSdf.from_skeleton(SkeletonFactory())
        points = np.array([[-0.5, 0.3, 0.1], [0.1, -0.2, 0.25], [0.6, 0.0, -0.4]])
        _, grads = sdf.values_and_gradients(points)
        np.testing.assert_allclose(grads, finite_difference_gradient(sdf.values, points),
                                   atol=1e-4)

    def test_validation(self):
        """Primitive arrays must agree and radii must be positive"""
        self.assertRaises(InvalidArgument, AnalyticSdf, np.zeros((2, 3)), np.zeros((1, 3)),
                          np.ones(2))
        self.assertRaises(InvalidArgument, AnalyticSdf, np.zeros((1, 3)), np.zeros((1, 3)),
                          np.zeros(1))


######################################################################
#  N E U R A L   S D F   T E S T   C A S E S
######################################################################
class TestNeuralSdf(unittest.TestCase):
    """Test Cases for the conditioned sine SDF"""

    def setUp(self):
        self.rng = np.random.default_rng(8)
        self.sdf = NeuralSdf.create(6, self.rng, width=16, depth=3, latent_dim=4)
        self.cond = self.rng.normal(scale=0.1, size=6)
        self.points = self.rng.uniform(-0.5, 0.5, (5, 3))

    def test_mapping_starts_as_identity(self):
        """A fresh mapping network modulates nothing"""
        with_latent = self.sdf.values(self.points, self.cond, self.rng.normal(size=4))
        without = self.sdf.values(self.points, self.cond)
        np.testing.assert_allclose(with_latent, without, atol=1e-12)

    def test_features_and_arrays(self):
        """Features come from the last hidden layer; every network is exposed"""
        out = sdf_eval(self.sdf, self.points, self.cond)
        self.assertEqual(out.s.shape, (5,))
        self.assertEqual(out.z.shape, (5, self.sdf.feature_dim))
        keys = self.sdf.named_arrays()
        self.assertIn("sdf.0.weight", keys)
        self.assertIn("mapping.2.bias", keys)

    def test_gradient(self):
        """Spatial gradients match finite differences"""
        _, grads = self.sdf.values_and_gradients(self.points, self.cond)
        numeric = finite_difference_gradient(lambda x: self.sdf.values(x, self.cond), self.points)
        np.testing.assert_allclose(grads, numeric, atol=1e-6)

    def test_conditioning_required(self):
        """Conditioned SDFs need their conditioning vector"""
        self.assertRaises(ShapeMismatch, self.sdf.values, self.points)
        self.assertRaises(ShapeMismatch, self.sdf.values, self.points, np.zeros(5))

    def test_points_shape(self):
        """Points are (N, 3)"""
        self.assertRaises(ShapeMismatch, self.sdf.evaluate, Tensor(np.zeros((4, 2))), self.cond)

    def test_mapping_width_checked(self):
        """The mapping network must emit a scale and offset per hidden unit"""
        mapping = MappingNetwork.create(4, 3, 16, self.rng, hidden=8)
        self.assertRaises(ShapeMismatch, MappingNetwork, mapping.params, 2, 16)

    def test_latent_rows(self):
        """Only the bound latent row is watched"""
        tape = Tape()
        latents = np.ones((3, 4))
        row = bind_latent(latents, 1, tape)
        self.assertEqual(row.shape, (4,))
        self.assertTrue(row.requires_grad)
        empty = bind_latent(np.zeros((0, 4)), 0, tape)
        np.testing.assert_allclose(empty.value, np.zeros(4))


######################################################################
#  N O R M A L   T E S T   C A S E S
######################################################################
class TestNormals(unittest.TestCase):
    """Test Cases for carrying normals into observation space"""

    def test_identity_blend(self):
        """At rest normals are only renormalized"""
        normals, degenerate = normals_observation(np.full((2, 3), 1.0 / 3.0),
                                                  BoneTransforms.identity(3),
                                                  np.array([[0.0, 0.0, 2.0], [1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(normals.value, [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        self.assertFalse(degenerate.any())

    def test_shared_rotation(self):
        """A rotation shared by every bone rotates the normal"""
        skel = SkeletonFactory()
        turn = RigidTransform.from_axis_angle([0.0, 0.0, math.pi / 2], [0.3, 0.0, 0.0])
        transforms = BoneTransforms((turn, turn, turn))
        normal = normal_observation(AnalyticSkinning(skel), transforms,
                                    np.array([0.1, 0.2, 0.0]), np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(normal, [0.0, 1.0, 0.0], atol=1e-12)

    def test_degenerate_blend(self):
        """Opposite rotations blended half and half have no rotation"""
        skel = capsule_chain(2)
        transforms = BoneTransforms((RigidTransform.identity(),
                                     RigidTransform.from_axis_angle([0.0, 0.0, math.pi])))
        self.assertRaises(DegenerateBlend, normal_observation, AnalyticSkinning(skel),
                          transforms, np.array([0.0, 0.3, 0.0]), np.array([0.0, 0.0, 1.0]))


######################################################################
#  C O L O R   T E S T   C A S E S
######################################################################
class TestColor(unittest.TestCase):
    """Test Cases for color fields"""

    def setUp(self):
        self.rng = np.random.default_rng(9)
        self.x = self.rng.normal(size=(4, 3))
        self.n = np.tile([0.0, 0.0, 1.0], (4, 1))
        self.v = np.tile([0.0, 1.0, 0.0], (4, 1))

    def test_color_net_range(self):
        """Colors are inside the unit cube"""
        net = ColorNet.create(5, 2, self.rng, width=8)
        rgb = color_eval(net, self.x, self.n, self.v, self.rng.normal(size=(4, 5)))
        self.assertEqual(rgb.shape, (4, 3))
        self.assertTrue(np.all((rgb > 0) & (rgb < 1)))

    def test_zero_color_net_is_grey(self):
        """A zero head gives sigmoid(0) everywhere"""
        net = ColorNet.create(0, 0, self.rng, width=8, zero_final=True)
        np.testing.assert_allclose(color_eval(net, self.x[0], self.n[0], self.v[0]),
                                   [0.5, 0.5, 0.5])

    def test_missing_features(self):
        """Feature-conditioned color needs features"""
        net = ColorNet.create(5, 0, self.rng, width=8)
        self.assertRaises(ShapeMismatch, color_eval, net, self.x, self.n, self.v)

    def test_constant(self):
        """Constant colors ignore every input"""
        rgb = color_eval(ConstantColor((2.0, 0.5, 0.25)), self.x, self.n, self.v)
        np.testing.assert_allclose(rgb, np.tile([1.0, 0.5, 0.25], (4, 1)))

    def test_lit_albedo(self):
        """Facing the light gives full albedo; facing away leaves the ambient floor"""
        skel = sphere_body(0.5)
        shader = AnalyticColor(skel, [[0.8, 0.4, 0.2]])
        lit = shader.shade_values(np.zeros((2, 3)), np.stack([LIGHT_DIRECTION, -LIGHT_DIRECTION]))
        np.testing.assert_allclose(lit[0], [0.8, 0.4, 0.2])
        np.testing.assert_allclose(lit[1], AMBIENT * np.array([0.8, 0.4, 0.2]))

    def test_albedo_count(self):
        """One albedo per bone"""
        self.assertRaises(ShapeMismatch, AnalyticColor, SkeletonFactory(), [[0.5, 0.5, 0.5]])
        self.assertEqual(AnalyticColor.palette(SkeletonFactory(), 3).albedo.shape, (3, 3))
