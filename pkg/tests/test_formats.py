"""
Test cases for rasters, meshes, tables, JSON documents, checkpoints and datasets
Test cases can be run with:
    nosetests
    coverage report -m
While debugging just these tests it's convenient to use this:
    nosetests --stop tests/test_formats.py:TestRasters
"""
import os
import json
import math
import logging
import tempfile
import unittest
import numpy as np
from avatar.formats import (Dataset, Frame, View, dumps, load_checkpoint, load_dataset,
                            quantize, read_csv, read_image, read_json, read_json_lines, read_obj,
                            read_pgm, read_ppm, save_checkpoint, write_csv, write_dataset,
                            write_image, write_json, write_obj, write_pgm, JsonLinesWriter)
from avatar.geom import Image
from avatar.skeleton import Pose
from avatar.avatar_exception import InvalidArgument, MissingResource
from .factories import CameraFactory, PoseFactory, SkeletonFactory

logging.disable(logging.CRITICAL)


class TempDirTestCase(unittest.TestCase):
    """Gives every test its own scratch directory"""

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)


######################################################################
#  R A S T E R   T E S T   C A S E S
######################################################################
class TestRasters(TempDirTestCase):
    """Test Cases for PPM and PGM files"""

    def test_quantize(self):
        """Values are clipped and rounded half to even"""
        np.testing.assert_array_equal(quantize(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])),
                                      [0, 0, 128, 255, 255])

    def test_ppm(self):
        """8-bit RGB survives a write and read up to quantization"""
        rgb = np.random.default_rng(0).uniform(size=(5, 7, 3))
        write_ppm_path = self.path("sub", "a.ppm")
        write_image(Image(7, 5, rgb), write_ppm_path)
        back = read_ppm(write_ppm_path)
        self.assertEqual(back.shape, (5, 7, 3))
        self.assertLessEqual(np.abs(back - rgb).max(), 0.5 / 255.0 + 1e-12)

    def test_pgm_mask(self):
        """Masks are stored as 0 or 255"""
        mask = np.array([[True, False, True], [False, False, True]])
        write_pgm(self.path("m.pgm"), mask)
        with open(self.path("m.pgm"), "rb") as handle:
            self.assertTrue(handle.read().startswith(b"P5\n3 2\n255\n"))
        np.testing.assert_array_equal(read_pgm(self.path("m.pgm")), mask)

    def test_header_comments(self):
        """Comment lines in the header are skipped"""
        with open(self.path("c.pgm"), "wb") as handle:
            handle.write(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(read_pgm(self.path("c.pgm")), [[False, True]])

    def test_bad_rasters(self):
        """Wrong magic, truncation and missing files are reported"""
        write_pgm(self.path("m.pgm"), np.ones((2, 2), dtype=bool))
        self.assertRaises(InvalidArgument, read_ppm, self.path("m.pgm"))
        with open(self.path("t.ppm"), "wb") as handle:
            handle.write(b"P6\n2 2\n255\n" + bytes(5))
        self.assertRaises(InvalidArgument, read_ppm, self.path("t.ppm"))
        self.assertRaises(MissingResource, read_ppm, self.path("none.ppm"))

    def test_image_pair(self):
        """An image and its mask are read back together"""
        image = Image(3, 2, np.full((2, 3, 3), 0.2), np.array([[1, 0, 0], [0, 1, 0]], bool))
        write_image(image, self.path("i.ppm"), self.path("i.pgm"))
        back = read_image(self.path("i.ppm"), self.path("i.pgm"))
        np.testing.assert_array_equal(back.mask, image.mask)
        write_pgm(self.path("small.pgm"), np.ones((1, 1), dtype=bool))
        self.assertRaises(InvalidArgument, read_image, self.path("i.ppm"), self.path("small.pgm"))


######################################################################
#  M E S H   A N D   T A B L E   T E S T   C A S E S
######################################################################
class TestMeshesAndTables(TempDirTestCase):
    """Test Cases for OBJ and CSV files"""

    def test_obj(self):
        """Faces are 1-based on disk and 0-based in memory"""
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        write_obj(self.path("t.obj"), vertices, [[0, 1, 2]], np.tile([0.0, 0.0, 1.0], (3, 1)))
        with open(self.path("t.obj")) as handle:
            self.assertIn("f 1//1 2//2 3//3", handle.read())
        v, f = read_obj(self.path("t.obj"))
        np.testing.assert_allclose(v, vertices)
        np.testing.assert_array_equal(f, [[0, 1, 2]])

    def test_csv(self):
        """Rows keep the column order; missing cells are blank"""
        write_csv(self.path("b.csv"), ["strategy", "ms"], [{"strategy": "joint", "ms": 1.5},
                                                          {"strategy": "secant"}])
        rows = read_csv(self.path("b.csv"))
        self.assertEqual(rows[0], {"strategy": "joint", "ms": "1.5"})
        self.assertEqual(rows[1]["ms"], "")


######################################################################
#  J S O N   T E S T   C A S E S
######################################################################
class TestJson(TempDirTestCase):
    """Test Cases for JSON documents and logs"""

    def test_numpy_and_non_finite(self):
        """Arrays become lists and non-finite floats become strings"""
        text = dumps({"a": np.arange(2), "b": np.float64(1.5), "c": math.inf, "d": np.bool_(1)})
        self.assertEqual(json.loads(text), {"a": [0, 1], "b": 1.5, "c": "inf", "d": True})

    def test_documents(self):
        """Written documents are read back; broken ones are validation errors"""
        write_json(self.path("d", "x.json"), {"k": [1, 2]})
        self.assertEqual(read_json(self.path("d", "x.json")), {"k": [1, 2]})
        with open(self.path("bad.json"), "w") as handle:
            handle.write("{nope")
        self.assertRaises(InvalidArgument, read_json, self.path("bad.json"))
        self.assertRaises(MissingResource, read_json, self.path("missing.json"))

    def test_json_lines(self):
        """Appending keeps earlier records"""
        with JsonLinesWriter(self.path("log.jsonl")) as log:
            log.write({"step": 1})
        with JsonLinesWriter(self.path("log.jsonl"), append=True) as log:
            log.write({"step": 2, "loss": math.nan})
        records = read_json_lines(self.path("log.jsonl"))
        self.assertEqual(records, [{"step": 1}, {"step": 2, "loss": "nan"}])


######################################################################
#  C H E C K P O I N T   T E S T   C A S E S
######################################################################
class TestCheckpoints(TempDirTestCase):
    """Test Cases for npz checkpoints"""

    def test_round_trip(self):
        """Arrays and header come back unchanged"""
        arrays = {"sdf.0.weight": np.arange(6.0).reshape(2, 3), "latents": np.zeros((1, 4))}
        save_checkpoint(self.path("run", "model.ckpt"), {"step": 7, "config": {"seed": 1}}, arrays)
        header, back = load_checkpoint(self.path("run", "model.ckpt"))
        self.assertEqual(header, {"step": 7, "config": {"seed": 1}})
        np.testing.assert_array_equal(back["sdf.0.weight"], arrays["sdf.0.weight"])
        self.assertEqual(sorted(back), ["latents", "sdf.0.weight"])

    def test_reserved_and_foreign(self):
        """The header key is reserved and plain npz files are refused"""
        self.assertRaises(InvalidArgument, save_checkpoint, self.path("x.ckpt"), {},
                          {"__header__": np.zeros(1)})
        with open(self.path("plain.npz"), "wb") as handle:
            np.savez(handle, a=np.zeros(1))
        self.assertRaises(InvalidArgument, load_checkpoint, self.path("plain.npz"))
        self.assertRaises(MissingResource, load_checkpoint, self.path("none.ckpt"))


######################################################################
#  D A T A S E T   T E S T   C A S E S
######################################################################
class TestDatasets(TempDirTestCase):
    """Test Cases for the dataset manifest"""

    def make_dataset(self):
        skel = SkeletonFactory()
        frames = []
        for index in range(2):
            views = []
            for cam_index in range(2):
                cam = CameraFactory(width=4, height=3)
                mask = np.zeros((3, 4), dtype=bool)
                mask[1, cam_index] = True
                views.append(View(cam, Image(4, 3, np.full((3, 4, 3), 0.5), mask), cam_index))
            frames.append(Frame(index, PoseFactory(), views))
        return Dataset(frames, skel, {"seed": 3})

    def test_write_and_load(self):
        """Poses, cameras and rasters are all restored"""
        dataset = self.make_dataset()
        manifest = write_dataset(self.tmp, dataset)
        self.assertEqual(manifest["frames"][1]["views"][0]["image"],
                         os.path.join("images", "f001_c00.ppm"))
        back = load_dataset(self.tmp)
        self.assertEqual(len(back), 2)
        self.assertEqual(back.scene, {"seed": 3})
        np.testing.assert_allclose(back.frames[1].pose.rotations, dataset.frames[1].pose.rotations)
        view = back.frames[0].views[1]
        self.assertEqual(view.camera_index, 1)
        self.assertAlmostEqual(view.camera.fx, dataset.frames[0].views[1].camera.fx)
        np.testing.assert_array_equal(view.image.mask, dataset.frames[0].views[1].image.mask)

    def test_pose_size_checked(self):
        """A pose with the wrong joint count is refused"""
        dataset = self.make_dataset()
        dataset.frames[0].pose = Pose.rest(5)
        write_dataset(self.tmp, dataset)
        self.assertRaises(InvalidArgument, load_dataset, self.tmp)

    def test_empty_manifest(self):
        """A manifest needs frames"""
        dataset = self.make_dataset()
        dataset.frames = []
        write_dataset(self.tmp, dataset)
        self.assertRaises(InvalidArgument, load_dataset, os.path.join(self.tmp, "manifest.json"))
