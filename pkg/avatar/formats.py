'''
On-disk formats

Binary PPM/PGM rasters (PNG through matplotlib when asked for), ASCII OBJ
meshes, CSV benchmark tables, JSON documents and JSON-lines logs, npz
checkpoints with a JSON header, and the synthetic dataset manifest.
'''

import os
import io
import csv
import json
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
from avatar.geom import Camera, Image
from avatar.skeleton import Pose, Skeleton
from avatar.avatar_exception import InvalidArgument, MissingResource

logger = logging.getLogger("avatar")

MANIFEST_NAME = "manifest.json"


def _require(path: str) -> None:
    if not os.path.exists(path):
        raise MissingResource("2 VALIDATION: %s does not exist" % path)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


######################################################################
#  R A S T E R S
######################################################################
def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-to-even"""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_netpbm(path: str, magic: bytes, width: int, height: int, data: np.ndarray) -> None:
    _ensure_parent(path)
    with open(path, "wb") as handle:
        handle.write(b"%s\n%d %d\n255\n" % (magic, width, height))
        handle.write(data.tobytes())


def _read_netpbm(path: str, magic: bytes, channels: int) -> np.ndarray:
    _require(path)
    with open(path, "rb") as handle:
        raw = handle.read()
    tokens = []
    position = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        while raw[position:position + 1].isspace():
            position += 1
        if raw[position:position + 1] == b"#":
            position = raw.index(b"\n", position) + 1
            continue
        end = position
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[position:end])
        position = end
    position += 1
    if tokens[0] != magic:
        raise InvalidArgument("2 VALIDATION: %s is not a %s file" % (path, magic.decode()))
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise InvalidArgument("2 VALIDATION: only 8-bit rasters are supported, got maxval %d"
                              % maxval)
    count = width * height * channels
    data = np.frombuffer(raw[position:position + count], dtype=np.uint8)
    if len(data) != count:
        raise InvalidArgument("2 VALIDATION: %s is truncated" % path)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return data.reshape(shape)


def write_ppm(path: str, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    _write_netpbm(path, b"P6", rgb.shape[1], rgb.shape[0], quantize(rgb))


def read_ppm(path: str) -> np.ndarray:
    """(H, W, 3) floats in [0, 1]"""
    return _read_netpbm(path, b"P6", 3).astype(np.float64) / 255.0


def write_pgm(path: str, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    values = np.where(mask.astype(bool), 255, 0).astype(np.uint8) if mask.dtype == bool \
        else quantize(mask)
    _write_netpbm(path, b"P5", mask.shape[1], mask.shape[0], values)


def read_pgm(path: str) -> np.ndarray:
    """(H, W) boolean mask (values above one half)"""
    return _read_netpbm(path, b"P5", 1) > 127


def write_png(path: str, rgb: np.ndarray) -> None:
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import pyplot
    _ensure_parent(path)
    pyplot.imsave(path, np.clip(np.asarray(rgb), 0.0, 1.0))


def write_image(image: Image, rgb_path: str, mask_path: Optional[str] = None,
                png: bool = False) -> None:
    write_ppm(rgb_path, image.rgb)
    if mask_path:
        write_pgm(mask_path, image.mask)
    if png:
        write_png(os.path.splitext(rgb_path)[0] + ".png", image.rgb)


def read_image(rgb_path: str, mask_path: str) -> Image:
    rgb = read_ppm(rgb_path)
    mask = read_pgm(mask_path)
    if mask.shape != rgb.shape[:2]:
        raise InvalidArgument("2 VALIDATION: mask %s does not match image %s"
                              % (mask_path, rgb_path))
    return Image(rgb.shape[1], rgb.shape[0], rgb, mask)


######################################################################
#  M E S H E S
######################################################################
def write_obj(path: str, vertices: np.ndarray, triangles: np.ndarray,
              normals: Optional[np.ndarray] = None) -> None:
    """ASCII OBJ with 1-based face indices"""
    _ensure_parent(path)
    with open(path, "w") as handle:
        for v in vertices:
            handle.write("v %.9g %.9g %.9g\n" % tuple(v))
        if normals is not None:
            for n in normals:
                handle.write("vn %.9g %.9g %.9g\n" % tuple(n))
        for t in np.asarray(triangles, dtype=np.int64) + 1:
            if normals is None:
                handle.write("f %d %d %d\n" % tuple(t))
            else:
                handle.write("f %d//%d %d//%d %d//%d\n" % (t[0], t[0], t[1], t[1], t[2], t[2]))


def read_obj(path: str) -> Tuple[np.ndarray, np.ndarray]:
    _require(path)
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    with open(path) as handle:
        for line in handle:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return (np.array(vertices, dtype=np.float64).reshape(-1, 3),
            np.array(faces, dtype=np.int64).reshape(-1, 3))


######################################################################
#  T A B L E S   A N D   D O C U M E N T S
######################################################################
def write_csv(path: str, columns: Sequence[str], rows: Iterable[Dict]) -> None:
    _ensure_parent(path)
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key) for key in columns})


def read_csv(path: str) -> List[Dict[str, str]]:
    _require(path)
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError("%s is not JSON serializable" % type(value))


def _finite(value):
    """Non-finite floats become strings so documents stay strict JSON"""
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def dumps(document) -> str:
    return json.dumps(_finite(json.loads(json.dumps(document, default=_json_default))),
                      sort_keys=True)


def write_json(path: str, document) -> None:
    _ensure_parent(path)
    with open(path, "w") as handle:
        handle.write(dumps(document))
        handle.write("\n")


def read_json(path: str):
    _require(path)
    with open(path) as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as error:
            raise InvalidArgument("2 VALIDATION: %s is not valid JSON: %s" % (path, error))


class JsonLinesWriter:
    """Appends one JSON document per line; flushes after every record"""

    def __init__(self, path: str, append: bool = False):
        _ensure_parent(path)
        self.path = path
        self._handle = open(path, "a" if append else "w")

    def write(self, record: dict) -> None:
        self._handle.write(dumps(record))
        self._handle.write("\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_json_lines(path: str) -> List[dict]:
    _require(path)
    with open(path) as handle:
        return [json.loads(line) for line in handle if line.strip()]


######################################################################
#  C H E C K P O I N T S
######################################################################
HEADER_KEY = "__header__"


def save_checkpoint(path: str, header: dict, arrays: Dict[str, np.ndarray]) -> None:
    """npz archive of named arrays plus a JSON header"""
    if HEADER_KEY in arrays:
        raise InvalidArgument("2 VALIDATION: %s is a reserved checkpoint key" % HEADER_KEY)
    _ensure_parent(path)
    buffer = io.BytesIO()
    np.savez(buffer, **{HEADER_KEY: np.array(dumps(header))}, **arrays)
    with open(path, "wb") as handle:
        handle.write(buffer.getvalue())
    logger.debug("Checkpoint written to %s (%d arrays)", path, len(arrays))


def load_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    _require(path)
    with np.load(path, allow_pickle=False) as archive:
        if HEADER_KEY not in archive.files:
            raise InvalidArgument("2 VALIDATION: %s is not a checkpoint" % path)
        header = json.loads(str(archive[HEADER_KEY]))
        arrays = {key: archive[key].copy() for key in archive.files if key != HEADER_KEY}
    return header, arrays


######################################################################
#  D A T A S E T
######################################################################
@dataclass
class View:
    camera: Camera
    image: Image
    camera_index: int = 0


@dataclass
class Frame:
    index: int
    pose: Pose
    views: List[View] = field(default_factory=list)


@dataclass
class Dataset:
    """Multi-view frames of one subject plus the scene description they were made from"""
    frames: List[Frame]
    skeleton: Skeleton
    scene: dict = field(default_factory=dict)
    root: str = ""

    def __len__(self) -> int:
        return len(self.frames)


def frame_file_names(frame: int, camera: int) -> Tuple[str, str]:
    stem = "f%03d_c%02d" % (frame, camera)
    return os.path.join("images", stem + ".ppm"), os.path.join("masks", stem + ".pgm")


def write_dataset(out_dir: str, dataset: Dataset, png: bool = False) -> dict:
    """Writes images, masks and the manifest; returns the manifest document"""
    frames = []
    for frame in dataset.frames:
        entries = []
        for view in frame.views:
            image_path, mask_path = frame_file_names(frame.index, view.camera_index)
            write_image(view.image, os.path.join(out_dir, image_path),
                        os.path.join(out_dir, mask_path), png)
            entries.append({"camera_index": view.camera_index, "image": image_path,
                            "mask": mask_path, "camera": view.camera.serialize_to_dict()})
        frames.append({"frame": frame.index, "pose": frame.pose.serialize_to_dict(),
                       "views": entries})
    manifest = {"skeleton": dataset.skeleton.serialize_to_dict(), "scene": dataset.scene,
                "frames": frames}
    write_json(os.path.join(out_dir, MANIFEST_NAME), manifest)
    logger.info("Wrote %d frames to %s", len(frames), out_dir)
    return manifest


def load_dataset(path: str) -> Dataset:
    """Reads a manifest (or the directory holding one) with all its rasters"""
    manifest_path = os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path
    root = os.path.dirname(os.path.abspath(manifest_path))
    manifest = read_json(manifest_path)
    try:
        skeleton = Skeleton.deserialize_from_dict(manifest["skeleton"])
        frames = []
        for entry in manifest["frames"]:
            pose = Pose.deserialize_from_dict(entry["pose"])
            if len(pose) != len(skeleton):
                raise InvalidArgument("2 VALIDATION: frame %s pose has %d joints, skeleton %d"
                                      % (entry["frame"], len(pose), len(skeleton)))
            views = [View(Camera.deserialize_from_dict(v["camera"]),
                          read_image(os.path.join(root, v["image"]), os.path.join(root, v["mask"])),
                          int(v.get("camera_index", i)))
                     for i, v in enumerate(entry["views"])]
            frames.append(Frame(int(entry["frame"]), pose, views))
    except KeyError as error:
        raise InvalidArgument("2 VALIDATION: manifest is missing key %s" % error.args[0])
    if not frames:
        raise InvalidArgument("2 VALIDATION: manifest %s lists no frames" % manifest_path)
    return Dataset(frames, skeleton, manifest.get("scene", {}), root)
