"""
Test cases for transforms, rays, cameras and images
Test cases can be run with:
    nosetests
    coverage report -m
While debugging just these tests it's convenient to use this:
    nosetests --stop tests/test_geom.py:TestCameras
"""
import math
import logging
import unittest
import numpy as np
from avatar.geom import (Camera, Image, Ray, RayBatch, RigidTransform, apply_rigid,
                         camera_ray_batch, camera_rays, invert_affine, normalize, orbit_cameras,
                         pixel_directions, project_points, ray_at, ray_box_bounds, vec3)
from avatar.avatar_exception import InvalidArgument
from .factories import CameraFactory, RayFactory

logging.disable(logging.CRITICAL)


######################################################################
#  R I G I D   T R A N S F O R M   T E S T   C A S E S
######################################################################
class TestRigidTransform(unittest.TestCase):
    """Test Cases for rigid transforms"""

    def test_identity_leaves_points(self):
        """The identity transform maps points to themselves"""
        points = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
        np.testing.assert_allclose(RigidTransform.identity().apply(points), points)

    def test_rejects_non_rotation(self):
        """A scaled matrix is not a rotation"""
        self.assertRaises(InvalidArgument, RigidTransform, 2.0 * np.eye(3), np.zeros(3))
        self.assertRaises(InvalidArgument, RigidTransform, np.eye(3), np.zeros(2))

    def test_rejects_reflection(self):
        """Determinant -1 is refused"""
        self.assertRaises(InvalidArgument, RigidTransform, np.diag([1.0, 1.0, -1.0]))

    def test_inverse_composes_to_identity(self):
        """T o T^-1 is the identity"""
        transform = RigidTransform.from_axis_angle([0.3, -0.2, 0.5], [1.0, 2.0, -0.5])
        both = transform.compose(transform.inverse())
        np.testing.assert_allclose(both.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(both.translation, np.zeros(3), atol=1e-12)

    def test_axis_angle_quarter_turn(self):
        """A quarter turn about z sends x to y"""
        transform = RigidTransform.from_axis_angle([0.0, 0.0, math.pi / 2])
        np.testing.assert_allclose(transform.apply(vec3(1, 0, 0)), [0.0, 1.0, 0.0], atol=1e-12)
        moved = RigidTransform.from_axis_angle([0.0, 0.0, math.pi / 2], [0.0, 0.0, 1.0])
        np.testing.assert_allclose(apply_rigid(moved, vec3(1, 0, 0)), [0.0, 1.0, 1.0], atol=1e-12)

    def test_matrix_form(self):
        """The homogeneous matrix carries rotation and translation"""
        transform = RigidTransform.from_translation([1.0, 2.0, 3.0])
        matrix = transform.matrix()
        self.assertEqual(matrix.shape, (4, 4))
        np.testing.assert_allclose(matrix[:3, 3], [1.0, 2.0, 3.0])
        self.assertEqual(RigidTransform.from_matrix(matrix).translation.tolist(), [1.0, 2.0, 3.0])

    def test_serialize_a_transform(self):
        """Transforms survive a dictionary round trip"""
        transform = RigidTransform.from_axis_angle([0.1, 0.2, 0.3], [4.0, 5.0, 6.0])
        copy = RigidTransform.deserialize_from_dict(transform.serialize_to_dict())
        np.testing.assert_allclose(copy.rotation, transform.rotation)
        np.testing.assert_allclose(copy.translation, transform.translation)

    def test_deserialize_bad_data(self):
        """Only dictionaries deserialize"""
        self.assertRaises(InvalidArgument, RigidTransform.deserialize_from_dict, "nope")

    def test_invert_affine_flags_singular_blocks(self):
        """Singular blocks come back as identity and are flagged"""
        blocks = np.zeros((2, 3, 4))
        blocks[0, :, :3] = np.eye(3)
        blocks[0, :, 3] = [1.0, 2.0, 3.0]
        inverse, singular = invert_affine(blocks)
        self.assertEqual(singular.tolist(), [False, True])
        np.testing.assert_allclose(inverse[0, :, 3], [-1.0, -2.0, -3.0])
        np.testing.assert_allclose(inverse[1, :, :3], np.eye(3))


######################################################################
#  R A Y   T E S T   C A S E S
######################################################################
class TestRays(unittest.TestCase):
    """Test Cases for rays and ray batches"""

    def test_ray_needs_unit_direction(self):
        """Directions must be normalized"""
        self.assertRaises(InvalidArgument, Ray, np.zeros(3), np.array([0.0, 0.0, 2.0]))

    def test_ray_bounds(self):
        """d_min must be non-negative and below d_max"""
        direction = np.array([0.0, 0.0, 1.0])
        self.assertRaises(InvalidArgument, Ray, np.zeros(3), direction, -1.0, 2.0)
        self.assertRaises(InvalidArgument, Ray, np.zeros(3), direction, 2.0, 2.0)

    def test_ray_at(self):
        """Points along a ray"""
        ray = RayFactory()
        np.testing.assert_allclose(ray_at(ray, 2.0), ray.origin + 2.0 * ray.direction)
        self.assertRaises(InvalidArgument, ray_at, ray, -0.5)

    def test_box_bounds(self):
        """Slab test through a unit box"""
        origins = np.array([[0.0, 0.0, -3.0], [5.0, 5.0, -3.0]])
        directions = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        near, far = ray_box_bounds(origins, directions, -np.ones(3), np.ones(3))
        self.assertAlmostEqual(near[0], 2.0)
        self.assertAlmostEqual(far[0], 4.0)
        self.assertLessEqual(far[1], near[1])

    def test_batch_validity_and_subset(self):
        """Rays that miss the box are invalid; subsets keep the flags"""
        origins = np.array([[0.0, 0.0, -3.0], [5.0, 5.0, -3.0], [0.2, 0.0, -3.0]])
        directions = np.tile([0.0, 0.0, 1.0], (3, 1))
        batch = RayBatch(origins, directions, 0.0, 10.0).with_box_bounds(-np.ones(3), np.ones(3))
        self.assertEqual(batch.valid.tolist(), [True, False, True])
        subset = batch.subset(np.array([1, 2]))
        self.assertEqual(len(subset), 2)
        self.assertEqual(subset.valid.tolist(), [False, True])
        np.testing.assert_allclose(batch.at(np.array([2.0, 2.0, 2.0]))[2], [0.2, 0.0, -1.0])

    def test_batch_shape_mismatch(self):
        """Origins and directions must pair up"""
        self.assertRaises(InvalidArgument, RayBatch, np.zeros((2, 3)), np.zeros((3, 3)), 0.0, 1.0)

    def test_batch_from_rays(self):
        """Single rays pack into a batch"""
        rays = [RayFactory() for _ in range(4)]
        batch = RayBatch.from_rays(rays)
        self.assertEqual(len(batch), 4)
        np.testing.assert_allclose(batch.ray(3).direction, rays[3].direction)


######################################################################
#  C A M E R A   T E S T   C A S E S
######################################################################
class TestCameras(unittest.TestCase):
    """Test Cases for pinhole cameras"""

    def test_look_at_center_pixel(self):
        """The central pixel of an odd-sized image looks at the target"""
        cam = Camera.look_at((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 60.0, 3, 3)
        directions = pixel_directions(cam)
        np.testing.assert_allclose(directions[4], [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(project_points(cam, np.zeros((1, 3)))[0], [1.5, 1.5])

    def test_image_y_grows_downward(self):
        """The top row of pixels looks up"""
        cam = Camera.look_at((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 60.0, 3, 3)
        directions = pixel_directions(cam)
        self.assertGreater(directions[1][1], 0.0)
        self.assertLess(directions[7][1], 0.0)

    def test_look_at_rejects_parallel_up(self):
        """The up vector cannot be the view axis"""
        self.assertRaises(InvalidArgument, Camera.look_at, (0.0, 3.0, 0.0), (0.0, 0.0, 0.0),
                          (0.0, 1.0, 0.0), 60.0, 4, 4)

    def test_invalid_intrinsics(self):
        """Focal lengths and sizes are validated"""
        self.assertRaises(InvalidArgument, Camera, 0.0, 1.0, 1.0, 1.0, 4, 4)
        self.assertRaises(InvalidArgument, Camera, 1.0, 1.0, 1.0, 1.0, 0, 4)

    def test_ray_batch_per_pixel(self):
        """One unit ray per pixel, all from the camera center"""
        cam = CameraFactory()
        batch = camera_ray_batch(cam)
        self.assertEqual(len(batch), cam.width * cam.height)
        np.testing.assert_allclose(np.linalg.norm(batch.directions, axis=1), 1.0)
        np.testing.assert_allclose(batch.origins, np.tile(cam.center, (len(batch), 1)))
        rays = camera_rays(cam)
        self.assertEqual(len(rays), len(batch))
        np.testing.assert_allclose(rays[-1].direction, batch.directions[-1])

    def test_points_behind_camera(self):
        """Points behind the camera do not project"""
        cam = CameraFactory()
        uv = project_points(cam, np.array([[0.0, 0.0, -5.0]]))
        self.assertTrue(np.all(np.isnan(uv)))

    def test_orbit_spacing(self):
        """Orbit cameras sit at equally spaced azimuths around the target"""
        target = np.array([0.0, 0.5, 0.0])
        cams = orbit_cameras(4, 3.0, 0.0, 40.0, 8, 8, target)
        self.assertEqual(len(cams), 4)
        offsets = normalize(np.array([cam.center - target for cam in cams]))
        for cam in cams:
            self.assertAlmostEqual(np.linalg.norm(cam.center - target), 3.0)
        for i in range(4):
            self.assertAlmostEqual(float(offsets[i] @ offsets[(i + 1) % 4]), 0.0, places=12)

    def test_serialize_a_camera(self):
        """Cameras survive a dictionary round trip"""
        cam = CameraFactory()
        copy = Camera.deserialize_from_dict(cam.serialize_to_dict())
        self.assertEqual((copy.width, copy.height), (cam.width, cam.height))
        self.assertAlmostEqual(copy.fx, cam.fx)
        np.testing.assert_allclose(copy.center, cam.center)


######################################################################
#  I M A G E   T E S T   C A S E S
######################################################################
class TestImages(unittest.TestCase):
    """Test Cases for image buffers"""

    def test_defaults_are_black(self):
        """A new image is black with an empty mask"""
        image = Image(4, 2)
        self.assertEqual(image.rgb.shape, (2, 4, 3))
        self.assertFalse(image.mask.any())

    def test_values_are_clipped(self):
        """Colors are clamped into [0, 1] and masks become booleans"""
        image = Image(2, 1, np.array([[[2.0, -1.0, 0.5], [0.1, 0.2, 0.3]]]), np.array([[1, 0]]))
        self.assertEqual(image.rgb.max(), 1.0)
        self.assertEqual(image.rgb.min(), 0.0)
        self.assertEqual(image.mask.dtype, bool)
        self.assertEqual(image.flat_mask().tolist(), [True, False])

    def test_from_flat(self):
        """Flat per-pixel arrays reshape to the camera size"""
        cam = Camera(1.0, 1.0, 1.5, 1.0, 3, 2)
        image = Image.from_flat(cam, np.full((6, 3), 0.25), np.ones(6, dtype=bool))
        self.assertEqual(image.rgb.shape, (2, 3, 3))
        self.assertEqual(image.flat_rgb().shape, (6, 3))
