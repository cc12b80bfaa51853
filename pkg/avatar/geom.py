'''
Core 3D math, cameras, rays and image buffers

All points are column vectors and every transform maps local coordinates
into the world (or observation) frame.
'''

import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple
import numpy as np
from scipy.spatial.transform import Rotation
from avatar.avatar_exception import InvalidArgument

logger = logging.getLogger("avatar")

ORTHONORMAL_TOLERANCE = 1e-9
UNIT_TOLERANCE = 1e-9


def vec3(x: float, y: float, z: float) -> np.ndarray:
    """Builds a 3-vector of 64-bit reals"""
    return np.array([x, y, z], dtype=np.float64)


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scales vectors along ``axis`` to unit length"""
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(norm, 1e-300)


######################################################################
#  R I G I D   T R A N S F O R M S
######################################################################
@dataclass(frozen=True)
class RigidTransform:
    """
    Rotation followed by translation, world-from-local
    """
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidArgument("2 VALIDATION: rigid transform needs a 3x3 rotation "
                                  "and a 3-vector, got %s and %s"
                                  % (rotation.shape, translation.shape))
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise InvalidArgument("2 VALIDATION: rigid transform has non-finite entries")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOLERANCE \
                or abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise InvalidArgument("2 VALIDATION: rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    ##################################################
    # CLASS METHODS
    ##################################################
    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_axis_angle(cls, axis_angle, translation=None) -> "RigidTransform":
        """Rotation given as an axis-angle 3-vector (radians)"""
        rotation = Rotation.from_rotvec(np.asarray(axis_angle, dtype=np.float64)).as_matrix()
        translation = np.zeros(3) if translation is None else translation
        return cls(_reorthonormalize(rotation), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(_reorthonormalize(matrix[:3, :3]), matrix[:3, 3].copy())

    ##################################################
    # PUBLIC INSTANCE METHODS
    ##################################################
    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form"""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Applies the transform to points of shape (..., 3)"""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rotation = self.rotation.T
        return RigidTransform(rotation, -rotation @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other"""
        return RigidTransform(_reorthonormalize(self.rotation @ other.rotation),
                              self.rotation @ other.translation + self.translation)

    def serialize_to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @staticmethod
    def deserialize_from_dict(data: dict) -> "RigidTransform":
        if not isinstance(data, dict):
            raise InvalidArgument("2 VALIDATION: <class 'dict'> expected for transform, "
                                  "got %s" % type(data))
        return RigidTransform(np.asarray(data["rotation"]), np.asarray(data["translation"]))


def _reorthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Projects a nearly-orthonormal matrix back onto SO(3)"""
    u, _, vt = np.linalg.svd(rotation)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def apply_rigid(transform: RigidTransform, p: np.ndarray) -> np.ndarray:
    """Returns R p + t"""
    return transform.apply(p)


######################################################################
#  R A Y S
######################################################################
@dataclass(frozen=True)
class Ray:
    """
    Camera ray c + v d restricted to d in [d_min, d_max]
    """
    origin: np.ndarray
    direction: np.ndarray
    d_min: float = 0.0
    d_max: float = math.inf

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64)
        direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(direction) - 1.0) > UNIT_TOLERANCE:
            raise InvalidArgument("2 VALIDATION: ray direction must be unit length, "
                                  "got norm %s" % np.linalg.norm(direction))
        if not 0.0 <= self.d_min < self.d_max:
            raise InvalidArgument("2 VALIDATION: ray bounds must satisfy 0 <= d_min < d_max, "
                                  "got [%s, %s]" % (self.d_min, self.d_max))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)


def ray_at(ray: Ray, d: float) -> np.ndarray:
    """Returns c + v d"""
    if d < 0:
        raise InvalidArgument("2 VALIDATION: depth along a ray must be non-negative, got %s" % d)
    return ray.origin + ray.direction * d


@dataclass
class RayBatch:
    """
    Structure-of-arrays form of many rays; ``valid`` is false for rays
    whose depth interval is empty (they never meet the scene bounds)
    """
    origins: np.ndarray
    directions: np.ndarray
    d_min: np.ndarray
    d_max: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        count = len(self.origins)
        self.d_min = np.broadcast_to(np.asarray(self.d_min, dtype=np.float64), (count,)).copy()
        self.d_max = np.broadcast_to(np.asarray(self.d_max, dtype=np.float64), (count,)).copy()
        if self.valid is None:
            self.valid = self.d_max > self.d_min
        if len(self.directions) != count:
            raise InvalidArgument("2 VALIDATION: %d origins but %d directions"
                                  % (count, len(self.directions)))

    def __len__(self) -> int:
        return len(self.origins)

    def at(self, depths: np.ndarray) -> np.ndarray:
        """Points c + v d for depths of shape (N,) or (N, S)"""
        depths = np.asarray(depths, dtype=np.float64)
        if depths.ndim == 1:
            return self.origins + self.directions * depths[:, None]
        return self.origins[:, None, :] + self.directions[:, None, :] * depths[..., None]

    def subset(self, index) -> "RayBatch":
        return RayBatch(self.origins[index], self.directions[index],
                        self.d_min[index], self.d_max[index], self.valid[index])

    def ray(self, i: int) -> Ray:
        d_min = float(self.d_min[i])
        d_max = float(self.d_max[i]) if self.valid[i] else d_min + 1.0
        return Ray(self.origins[i], self.directions[i], d_min, d_max)

    @staticmethod
    def from_rays(rays: List[Ray]) -> "RayBatch":
        return RayBatch(np.array([r.origin for r in rays]),
                        np.array([r.direction for r in rays]),
                        np.array([r.d_min for r in rays]),
                        np.array([r.d_max for r in rays]))

    def with_box_bounds(self, box_min: np.ndarray, box_max: np.ndarray) -> "RayBatch":
        """Clips every ray's interval to an axis-aligned box (slab test)"""
        d_min, d_max = ray_box_bounds(self.origins, self.directions, box_min, box_max)
        return RayBatch(self.origins, self.directions, d_min, d_max)


def ray_box_bounds(origins: np.ndarray, directions: np.ndarray,
                   box_min: np.ndarray, box_max: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry and exit depths of rays through a box; empty intervals have d_max <= d_min"""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (box_min - origins) * inv
        t1 = (box_max - origins) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    near = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    far = np.maximum(t0, t1).min(axis=1)
    far = np.where(far > near, far, near)
    return near, far


######################################################################
#  C A M E R A S
######################################################################
@dataclass(frozen=True)
class Camera:
    """
    Pinhole camera; the extrinsic maps camera coordinates to world.
    The camera looks down +z with image y growing downward.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("2 VALIDATION: focal lengths must be positive, got %s, %s"
                                  % (self.fx, self.fy))
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("2 VALIDATION: image size must be at least 1x1, got %sx%s"
                                  % (self.width, self.height))

    @property
    def center(self) -> np.ndarray:
        return self.extrinsic.translation

    @classmethod
    def look_at(cls, eye, target, up, fov_degrees: float,
                width: int, height: int) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with a vertical field of view"""
        eye = np.asarray(eye, dtype=np.float64)
        forward = normalize(np.asarray(target, dtype=np.float64) - eye)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise InvalidArgument("2 VALIDATION: camera up vector is parallel to the view axis")
        right = normalize(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        focal = 0.5 * height / math.tan(math.radians(fov_degrees) / 2)
        return cls(focal, focal, width / 2.0, height / 2.0, width, height,
                   RigidTransform(rotation, eye))

    def serialize_to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsic": self.extrinsic.serialize_to_dict(),
        }

    @staticmethod
    def deserialize_from_dict(data: dict) -> "Camera":
        return Camera(float(data["fx"]), float(data["fy"]), float(data["cx"]),
                      float(data["cy"]), int(data["width"]), int(data["height"]),
                      RigidTransform.deserialize_from_dict(data["extrinsic"]))


def pixel_directions(cam: Camera) -> np.ndarray:
    """World-frame unit directions through every pixel center, row-major (H*W, 3)"""
    u, v = np.meshgrid(np.arange(cam.width, dtype=np.float64),
                       np.arange(cam.height, dtype=np.float64))
    local = np.stack([(u.ravel() + 0.5 - cam.cx) / cam.fx,
                      (v.ravel() + 0.5 - cam.cy) / cam.fy,
                      np.ones(cam.width * cam.height)], axis=1)
    return normalize(local @ cam.extrinsic.rotation.T)


def camera_ray_batch(cam: Camera, box_min: Optional[np.ndarray] = None,
                     box_max: Optional[np.ndarray] = None) -> RayBatch:
    """All pixel rays of a camera; bounded by a box when one is given"""
    directions = pixel_directions(cam)
    origins = np.broadcast_to(cam.center, directions.shape).copy()
    if box_min is None:
        return RayBatch(origins, directions, 0.0, math.inf)
    d_min, d_max = ray_box_bounds(origins, directions, np.asarray(box_min), np.asarray(box_max))
    return RayBatch(origins, directions, d_min, d_max)


def camera_rays(cam: Camera) -> List[Ray]:
    """One world-frame ray per pixel, row-major"""
    batch = camera_ray_batch(cam)
    return [Ray(batch.origins[i], batch.directions[i]) for i in range(len(batch))]


def project_points(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Pixel coordinates (u, v) of world points; rows behind the camera become nan"""
    local = cam.extrinsic.inverse().apply(points)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * local[:, 0] / local[:, 2] + cam.cx
        v = cam.fy * local[:, 1] / local[:, 2] + cam.cy
    behind = local[:, 2] <= 0
    u[behind] = np.nan
    v[behind] = np.nan
    return np.stack([u, v], axis=1)


def orbit_cameras(count: int, radius: float, height: float, fov_degrees: float,
                  width: int, height_px: int, target=(0.0, 0.0, 0.0)) -> List[Camera]:
    """Cameras at equally spaced azimuths on a horizontal circle around ``target``"""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(count):
        azimuth = 2.0 * math.pi * i / count
        eye = target + np.array([radius * math.sin(azimuth), height, radius * math.cos(azimuth)])
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), fov_degrees, width, height_px))
    return cams


######################################################################
#  I M A G E S
######################################################################
@dataclass
class Image:
    """
    RGB image in [0, 1] with a binary foreground mask
    """
    width: int
    height: int
    rgb: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rgb is None:
            self.rgb = np.zeros((self.height, self.width, 3))
        if self.mask is None:
            self.mask = np.zeros((self.height, self.width), dtype=bool)
        self.rgb = np.clip(np.asarray(self.rgb, dtype=np.float64)
                           .reshape(self.height, self.width, 3), 0.0, 1.0)
        self.mask = np.asarray(self.mask).reshape(self.height, self.width).astype(bool)

    @classmethod
    def from_flat(cls, cam: Camera, rgb: np.ndarray, mask: np.ndarray) -> "Image":
        return cls(cam.width, cam.height, rgb.reshape(cam.height, cam.width, 3),
                   mask.reshape(cam.height, cam.width))

    def flat_rgb(self) -> np.ndarray:
        return self.rgb.reshape(-1, 3)

    def flat_mask(self) -> np.ndarray:
        return self.mask.reshape(-1)


def invert_affine(matrices: np.ndarray, min_det: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inverts a stack of 3x4 affine blocks. Returns the inverses and a mask of
    rows whose linear part was singular (those rows hold identity).
    """
    linear = matrices[..., :3, :3]
    det = np.linalg.det(linear)
    singular = np.abs(det) < min_det
    safe = np.where(singular[..., None, None], np.eye(3), linear)
    inv_linear = np.linalg.inv(safe)
    inv_translation = -np.einsum("...ij,...j->...i", inv_linear, matrices[..., :3, 3])
    out = np.concatenate([inv_linear, inv_translation[..., None]], axis=-1)
    if np.any(singular):
        logger.debug("%d singular affine blocks replaced by identity", int(singular.sum()))
    return out, singular