'''
The toy articulated body

A skeleton is a tree of bones. Each bone owns a joint, given as an offset
from its parent's joint, and a capsule rigidly attached in the rest pose.
Forward kinematics turns a Pose into per-bone transforms B_b that map
canonical (rest) points into observation space; linear blend skinning
mixes them with per-point weights.
'''

import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union
import numpy as np
from scipy.spatial.transform import Rotation
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.mlp import Activation, MlpParams, build_mlp, mlp_evaluate, spatial_tangent
from avatar.geom import RigidTransform, invert_affine
from avatar.avatar_exception import (InvalidArgument, ShapeMismatch, SingularTransform)

logger = logging.getLogger("avatar")

DEFAULT_TAU = 0.05
SKINNING_WIDTH = 128
SKINNING_DEPTH = 4


######################################################################
#  S K E L E T O N
######################################################################
@dataclass(frozen=True)
class Capsule:
    """Segment p0-p1 swept by a sphere of ``radius``, canonical coordinates"""
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=np.float64).reshape(3))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=np.float64).reshape(3))
        if not self.radius > 0:
            raise InvalidArgument("2 VALIDATION: capsule radius must be positive, got %s"
                                  % self.radius)

    def serialize_to_dict(self) -> dict:
        return {"p0": self.p0.tolist(), "p1": self.p1.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Bone:
    parent: int
    offset: np.ndarray
    capsule: Capsule
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))

    def serialize_to_dict(self) -> dict:
        return {"parent": self.parent, "offset": self.offset.tolist(),
                "capsule": self.capsule.serialize_to_dict(), "name": self.name}


@dataclass(frozen=True)
class Skeleton:
    """
    Bones listed parents-first; bone 0 is the root (parent -1)
    """
    bones: Tuple[Bone, ...]
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        object.__setattr__(self, "bones", tuple(self.bones))
        if not self.bones:
            raise InvalidArgument("2 VALIDATION: a skeleton needs at least one bone")
        if self.bones[0].parent != -1:
            raise InvalidArgument("2 VALIDATION: bone 0 must be the root (parent -1)")
        for i, bone in enumerate(self.bones[1:], start=1):
            if not 0 <= bone.parent < i:
                raise InvalidArgument("2 VALIDATION: bone %d has parent %d; parents must "
                                      "precede children" % (i, bone.parent))
        if not self.tau > 0:
            raise InvalidArgument("2 VALIDATION: skinning temperature must be positive")

    def __len__(self) -> int:
        return len(self.bones)

    @property
    def parents(self) -> np.ndarray:
        return np.array([bone.parent for bone in self.bones])

    @property
    def offsets(self) -> np.ndarray:
        return np.stack([bone.offset for bone in self.bones])

    @property
    def capsule_p0(self) -> np.ndarray:
        return np.stack([bone.capsule.p0 for bone in self.bones])

    @property
    def capsule_p1(self) -> np.ndarray:
        return np.stack([bone.capsule.p1 for bone in self.bones])

    @property
    def capsule_radii(self) -> np.ndarray:
        return np.array([bone.capsule.radius for bone in self.bones])

    def rest_joints(self) -> np.ndarray:
        """Absolute canonical joint positions (B, 3)"""
        joints = np.zeros((len(self), 3))
        for i, bone in enumerate(self.bones):
            joints[i] = bone.offset if bone.parent < 0 else joints[bone.parent] + bone.offset
        return joints

    def bounds(self, margin: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        """Canonical axis-aligned box around every capsule"""
        ends = np.concatenate([self.capsule_p0, self.capsule_p1])
        radii = np.concatenate([self.capsule_radii, self.capsule_radii])[:, None]
        return (ends - radii).min(axis=0) - margin, (ends + radii).max(axis=0) + margin

    def serialize_to_dict(self) -> dict:
        return {"tau": self.tau, "bones": [bone.serialize_to_dict() for bone in self.bones]}

    @staticmethod
    def deserialize_from_dict(data: dict) -> "Skeleton":
        try:
            bones = [Bone(int(b["parent"]), b["offset"],
                          Capsule(b["capsule"]["p0"], b["capsule"]["p1"],
                                  float(b["capsule"]["radius"])), b.get("name", ""))
                     for b in data["bones"]]
        except KeyError as error:
            raise InvalidArgument("2 VALIDATION: skeleton is missing key %s" % error.args[0])
        return Skeleton(tuple(bones), float(data.get("tau", DEFAULT_TAU)))


@dataclass(frozen=True)
class Pose:
    """Global transform, per-joint axis-angle rotations (B, 3) and bone-length scales (B,)"""
    global_transform: RigidTransform
    rotations: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(rotations)):
            raise InvalidArgument("2 VALIDATION: joint rotations must be finite")
        if len(scales) != len(rotations):
            raise ShapeMismatch("2 VALIDATION: %d joint rotations but %d scale factors"
                                % (len(rotations), len(scales)))
        if not np.all(scales > 0):
            raise InvalidArgument("2 VALIDATION: bone scale factors must be positive")
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "scales", scales)

    @classmethod
    def rest(cls, n_bones: int) -> "Pose":
        return cls(RigidTransform.identity(), np.zeros((n_bones, 3)), np.ones(n_bones))

    def __len__(self) -> int:
        return len(self.rotations)

    def conditioning(self) -> np.ndarray:
        """Flattened (theta, beta) vector fed to the SDF"""
        return np.concatenate([self.rotations.ravel(), self.scales])

    def with_rotations(self, rotations: np.ndarray) -> "Pose":
        return Pose(self.global_transform, rotations, self.scales)

    def with_global(self, transform: RigidTransform) -> "Pose":
        return Pose(transform, self.rotations, self.scales)

    def serialize_to_dict(self) -> dict:
        return {
            "global": self.global_transform.serialize_to_dict(),
            "rotations": self.rotations.tolist(),
            "scales": self.scales.tolist(),
        }

    @staticmethod
    def deserialize_from_dict(data: dict) -> "Pose":
        if not isinstance(data, dict):
            raise InvalidArgument("2 VALIDATION: <class 'dict'> expected for pose, got %s"
                                  % type(data))
        return Pose(RigidTransform.deserialize_from_dict(data["global"]),
                    np.asarray(data["rotations"]), np.asarray(data["scales"]))


@dataclass(frozen=True)
class BoneTransforms:
    """Observation-from-canonical transform per bone"""
    transforms: Tuple[RigidTransform, ...]
    matrices: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        object.__setattr__(self, "matrices",
                           np.stack([np.concatenate([t.rotation, t.translation[:, None]], axis=1)
                                     for t in self.transforms]))

    def __len__(self) -> int:
        return len(self.transforms)

    def __getitem__(self, index: int) -> RigidTransform:
        return self.transforms[index]

    @classmethod
    def identity(cls, n_bones: int) -> "BoneTransforms":
        return cls(tuple(RigidTransform.identity() for _ in range(n_bones)))

    @classmethod
    def from_matrices(cls, matrices: np.ndarray) -> "BoneTransforms":
        return cls(tuple(RigidTransform(m[:, :3], m[:, 3]) for m in np.asarray(matrices)))


Transforms = Union[BoneTransforms, Tensor, np.ndarray]


def transform_stack(transforms: Transforms) -> Tensor:
    """(B, 3, 4) matrices as a tensor; differentiable when given a tape tensor"""
    if isinstance(transforms, BoneTransforms):
        return Tensor(transforms.matrices)
    return ad.as_tensor(transforms)


def transform_values(transforms: Transforms) -> np.ndarray:
    if isinstance(transforms, BoneTransforms):
        return transforms.matrices
    return ad.value_of(transforms)


######################################################################
#  F O R W A R D   K I N E M A T I C S
######################################################################
def pose_to_transforms(skel: Skeleton, pose: Pose) -> BoneTransforms:
    """
    B_b = global o G_b o T(-J_b), where G_b chains the parent's frame, the
    scaled joint offset and the joint rotation. The rest pose gives identities.
    """
    if len(pose) != len(skel):
        raise ShapeMismatch("2 VALIDATION: pose has %d joints, skeleton has %d bones"
                            % (len(pose), len(skel)))
    rest = skel.rest_joints()
    local = Rotation.from_rotvec(pose.rotations).as_matrix()
    frame_rot = np.zeros((len(skel), 3, 3))
    frame_pos = np.zeros((len(skel), 3))
    for i, bone in enumerate(skel.bones):
        offset = bone.offset * pose.scales[i]
        if bone.parent < 0:
            frame_rot[i] = local[i]
            frame_pos[i] = offset
        else:
            frame_rot[i] = frame_rot[bone.parent] @ local[i]
            frame_pos[i] = frame_rot[bone.parent] @ offset + frame_pos[bone.parent]
    out = []
    for i in range(len(skel)):
        translation = frame_pos[i] - frame_rot[i] @ rest[i]
        bone_local = RigidTransform.from_matrix(
            np.concatenate([frame_rot[i], translation[:, None]], axis=1))
        out.append(pose.global_transform.compose(bone_local))
    return BoneTransforms(tuple(out))


def rotation_tensor(rotvec: Tensor) -> Tensor:
    """Rodrigues' formula on the tape; series coefficients near zero angle"""
    rotvec = ad.as_tensor(rotvec)
    angle2 = ad.tsum(ad.square(rotvec))
    x, y, z = rotvec[0], rotvec[1], rotvec[2]
    zero = x * 0.0
    skew = ad.stack([ad.stack([zero, -z, y]), ad.stack([z, zero, -x]), ad.stack([-y, x, zero])])
    if angle2.item() < 1e-10:
        first = 1.0 - angle2 / 6.0
        second = 0.5 - angle2 / 24.0
    else:
        angle = ad.sqrt(angle2)
        first = ad.sin(angle) / angle
        second = (1.0 - ad.cos(angle)) / angle2
    return Tensor(np.eye(3)) + skew * first + (skew @ skew) * second


def transforms_tensor(skel: Skeleton, rotations: Tensor, global_rotvec: Tensor,
                      global_translation: Tensor, scales: Optional[np.ndarray] = None) -> Tensor:
    """Differentiable forward kinematics; returns (B, 3, 4)"""
    rotations = ad.as_tensor(rotations)
    scales = np.ones(len(skel)) if scales is None else np.asarray(scales)
    if rotations.shape != (len(skel), 3):
        raise ShapeMismatch("2 VALIDATION: expected rotations of shape (%d, 3), got %s"
                            % (len(skel), rotations.shape))
    rest = skel.rest_joints()
    global_rot = rotation_tensor(global_rotvec)
    global_t = ad.reshape(ad.as_tensor(global_translation), (3, 1))
    frame_rot: List[Tensor] = []
    frame_pos: List[Tensor] = []
    blocks = []
    for i, bone in enumerate(skel.bones):
        local = rotation_tensor(rotations[i])
        offset = Tensor((bone.offset * scales[i])[:, None])
        if bone.parent < 0:
            rot, pos = local, offset
        else:
            rot = frame_rot[bone.parent] @ local
            pos = frame_rot[bone.parent] @ offset + frame_pos[bone.parent]
        frame_rot.append(rot)
        frame_pos.append(pos)
        translation = global_rot @ (pos - rot @ Tensor(rest[i][:, None])) + global_t
        blocks.append(ad.concat([global_rot @ rot, translation], axis=1))
    return ad.stack(blocks)


######################################################################
#  S K I N N I N G   W E I G H T S
######################################################################
def segment_distances(p0: np.ndarray, p1: np.ndarray, radii: np.ndarray,
                      x: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Signed distance from points (N, 3) to capsules (N, P), and the unit
    offsets from the closest axis points (N, P, 3), i.e. the gradients.
    Capsules with p0 == p1 are spheres.
    """
    x = ad.as_tensor(x)
    axis = p1 - p0
    length2 = np.sum(axis * axis, axis=-1)
    safe = np.where(length2 > 0, length2, 1.0)
    rel = ad.expand_dims(x, 1) - Tensor(p0)
    t = ad.clip(ad.dot(rel, Tensor(axis)) / Tensor(safe), 0.0, 1.0)
    diff = rel - ad.expand_dims(t, -1) * Tensor(axis)
    length = ad.norm(diff, axis=-1, keepdims=True, eps=1e-24)
    dist = ad.reshape(length, length.shape[:-1]) - Tensor(radii)
    return dist, diff / length


def segment_distances_np(p0: np.ndarray, p1: np.ndarray, radii: np.ndarray,
                         x: np.ndarray) -> np.ndarray:
    """Plain numpy signed capsule distances (N, P)"""
    axis = p1 - p0
    length2 = np.sum(axis * axis, axis=-1)
    rel = x[:, None, :] - p0[None]
    t = np.clip(np.sum(rel * axis, axis=-1) / np.where(length2 > 0, length2, 1.0), 0.0, 1.0)
    return np.linalg.norm(rel - t[..., None] * axis, axis=-1) - radii


def capsule_distances(skel: Skeleton, x: Tensor) -> Tuple[Tensor, Tensor]:
    return segment_distances(skel.capsule_p0, skel.capsule_p1, skel.capsule_radii, x)


def capsule_distances_np(skel: Skeleton, x: np.ndarray) -> np.ndarray:
    return segment_distances_np(skel.capsule_p0, skel.capsule_p1, skel.capsule_radii, x)


def _to_tangent_layout(v: Tensor) -> Tensor:
    """(N, B, 3) -> (3, N, B)"""
    return ad.swapaxes(ad.swapaxes(v, 0, 2), 1, 2)


def softmax_tangent(weights: Tensor, dlogits: Tensor) -> Tensor:
    """Pushes logit tangents (3, N, B) through a softmax over the last axis"""
    return weights * (dlogits - ad.tsum(weights * dlogits, axis=-1, keepdims=True))


class SkinningField:
    """Maps canonical points to skinning weights on the simplex"""
    n_bones: int = 0

    def evaluate(self, x: Tensor, tape: Optional[Tape] = None,
                 tangent: bool = False) -> Tuple[Tensor, Optional[Tensor]]:
        raise NotImplementedError

    def weights(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(Tensor(np.atleast_2d(x)))[0].value

    def weights_and_tangent(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        w, dw = self.evaluate(Tensor(np.atleast_2d(x)), tangent=True)
        return w.value, dw.value

    def named_arrays(self) -> dict:
        return {}


class AnalyticSkinning(SkinningField):
    """w_b proportional to exp(-dist(x, capsule_b) / tau)"""

    def __init__(self, skel: Skeleton, tau: Optional[float] = None):
        self.skel = skel
        self.tau = skel.tau if tau is None else tau
        self.n_bones = len(skel)

    def evaluate(self, x, tape=None, tangent=False):
        dist, grad = capsule_distances(self.skel, x)
        weights = ad.softmax(dist * (-1.0 / self.tau), axis=-1)
        if not tangent:
            return weights, None
        return weights, softmax_tangent(weights, _to_tangent_layout(grad) * (-1.0 / self.tau))


class NeuralSkinning(SkinningField):
    """3 -> 128 x 4 -> B softplus network with weight normalization and a softmax head"""

    def __init__(self, params: MlpParams):
        self.params = params
        self.n_bones = params.output_dim

    @classmethod
    def create(cls, n_bones: int, rng: np.random.Generator, width: int = SKINNING_WIDTH,
               depth: int = SKINNING_DEPTH, zero_final: bool = False) -> "NeuralSkinning":
        dims = [3] + [width] * depth + [n_bones]
        return cls(build_mlp(dims, Activation("softplus", beta=100.0), rng, weight_norm=True,
                             zero_final=zero_final, name="skinning"))

    def evaluate(self, x, tape=None, tangent=False):
        x = ad.as_tensor(x)
        out = mlp_evaluate(self.params, x, tape,
                           spatial_tangent(x.shape[0], 3) if tangent else None)
        weights = ad.softmax(out.output, axis=-1)
        if not tangent:
            return weights, None
        return weights, softmax_tangent(weights, out.tangent)

    def named_arrays(self) -> dict:
        return self.params.named_arrays()


class BackwardSkinning:
    """
    Observation-space weight network: input is the point brought back by the
    inverse global transform, concatenated with the joint rotations
    """

    def __init__(self, params: MlpParams):
        self.params = params
        self.n_bones = params.output_dim

    @classmethod
    def create(cls, n_bones: int, rng: np.random.Generator, width: int = SKINNING_WIDTH,
               depth: int = SKINNING_DEPTH) -> "BackwardSkinning":
        dims = [3 + 3 * n_bones] + [width] * depth + [n_bones]
        return cls(build_mlp(dims, Activation("softplus", beta=100.0), rng, weight_norm=True,
                             name="backward_skinning"))

    def evaluate(self, x_obs: Tensor, pose: Pose, tape: Optional[Tape] = None) -> Tensor:
        x_obs = ad.as_tensor(x_obs)
        inverse = pose.global_transform.inverse()
        local = x_obs @ Tensor(inverse.rotation.T) + Tensor(inverse.translation)
        theta = np.broadcast_to(pose.rotations.ravel(), (x_obs.shape[0], 3 * len(pose)))
        logits = mlp_evaluate(self.params, ad.concat([local, Tensor(theta)], axis=-1), tape).output
        return ad.softmax(logits, axis=-1)

    def canonicalize(self, x_obs: np.ndarray, pose: Pose,
                     transforms: BoneTransforms) -> Tuple[np.ndarray, np.ndarray]:
        """Closed-form canonical points and a mask of singular blends"""
        weights = self.evaluate(Tensor(x_obs), pose).value
        return invert_blend(weights, transforms, x_obs)

    def canonicalize_tensor(self, x_obs: Tensor, pose: Pose, transforms: Transforms,
                            tape: Optional[Tape] = None) -> Tensor:
        """Differentiable closed-form canonical points"""
        weights = self.evaluate(x_obs, pose, tape)
        stack = transform_stack(transforms)
        blended = ad.reshape(weights @ ad.reshape(stack, (stack.shape[0], 12)), (-1, 3, 4))
        return ad.matvec(ad.inverse(blended[:, :, :3]), ad.as_tensor(x_obs) - blended[:, :, 3])

    def named_arrays(self) -> dict:
        return self.params.named_arrays()


######################################################################
#  L I N E A R   B L E N D   S K I N N I N G
######################################################################
def _points(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


def blend(weights: np.ndarray, transforms: Transforms) -> np.ndarray:
    """Blended (N, 3, 4) matrices sum_b w_b B_b"""
    return np.einsum("nb,bij->nij", np.atleast_2d(weights), transform_values(transforms))


def forward_lbs(weights: np.ndarray, transforms: Transforms, x: np.ndarray) -> np.ndarray:
    """x_obs = (sum_b w_b B_b) x in homogeneous coordinates"""
    points, single = _points(x)
    blended = blend(weights, transforms)
    out = np.einsum("nij,nj->ni", blended[:, :, :3], points) + blended[:, :, 3]
    return out[0] if single else out


def forward_lbs_tensor(weights: Tensor, transforms: Transforms, x: Tensor) -> Tensor:
    """Differentiable LBS of points (N, 3) with weights (N, B)"""
    stack = transform_stack(transforms)
    count = stack.shape[0]
    flat = ad.reshape(stack, (count, 12))
    blended = ad.reshape(ad.as_tensor(weights) @ flat, (-1, 3, 4))
    return ad.matvec(blended[:, :, :3], x) + blended[:, :, 3]


def lbs_with_jacobian(field: SkinningField, transforms: Transforms,
                      x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posed points and the exact Jacobian d LBS / d x (N, 3, 3), including
    the spatial derivative of the weight field
    """
    points, _ = _points(x)
    weights, dweights = field.weights_and_tangent(points)
    stack = transform_values(transforms)
    blended = blend(weights, stack)
    posed = np.einsum("bij,nj->nbi", stack[:, :, :3], points) + stack[None, :, :, 3]
    x_obs = np.einsum("nij,nj->ni", blended[:, :, :3], points) + blended[:, :, 3]
    jacobian = blended[:, :, :3] + np.einsum("nbi,knb->nik", posed, dweights)
    return x_obs, jacobian


def lbs_points(field: SkinningField, transforms: Transforms, x: np.ndarray) -> np.ndarray:
    points, single = _points(x)
    out = forward_lbs(field.weights(points), transforms, points)
    return out[0] if single else out


def skinning_jacobian(field: SkinningField, transforms: Transforms, x: np.ndarray) -> np.ndarray:
    """3x3 Jacobian of forward LBS; batched for (N, 3) input"""
    points, single = _points(x)
    jacobian = lbs_with_jacobian(field, transforms, points)[1]
    return jacobian[0] if single else jacobian


def invert_blend(weights: np.ndarray, transforms: Transforms,
                 x_obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(sum_b w_b B_b)^-1 x_obs, with a mask of singular blends (identity there)"""
    inverse, singular = invert_affine(blend(weights, transforms))
    return np.einsum("nij,nj->ni", inverse[:, :, :3], x_obs) + inverse[:, :, 3], singular


def polar_rotation(matrices: np.ndarray, min_det: float = 1e-8) -> Tuple[np.ndarray, np.ndarray]:
    """Closest rotations to 3x3 blocks (SVD polar factor) and a degenerate mask"""
    u, _, vt = np.linalg.svd(matrices)
    det = np.linalg.det(matrices)
    rot = u @ vt
    flip = np.linalg.det(rot) < 0
    if np.any(flip):
        u = u.copy()
        u[flip, :, -1] *= -1
        rot = u @ vt
    return rot, det < min_det


######################################################################
#  A P P R O X I M A T E   I N V E R S E
######################################################################
def posed_capsules(skel: Skeleton, transforms: Transforms) -> Tuple[np.ndarray, np.ndarray]:
    stack = transform_values(transforms)
    p0 = np.einsum("bij,bj->bi", stack[:, :, :3], skel.capsule_p0) + stack[:, :, 3]
    p1 = np.einsum("bij,bj->bi", stack[:, :, :3], skel.capsule_p1) + stack[:, :, 3]
    return p0, p1


def posed_capsule_distances(skel: Skeleton, transforms: Transforms,
                            x_obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distances (N, B) to the rigidly posed capsules and closest axis points (N, B, 3)"""
    p0, p1 = posed_capsules(skel, transforms)
    axis = p1 - p0
    length2 = np.sum(axis * axis, axis=-1)
    rel = x_obs[:, None, :] - p0[None]
    t = np.clip(np.sum(rel * axis, axis=-1) / np.where(length2 > 0, length2, 1.0), 0.0, 1.0)
    closest = p0[None] + t[..., None] * axis
    return np.linalg.norm(x_obs[:, None, :] - closest, axis=-1) - skel.capsule_radii, closest


def nearest_body_weights(transforms: Transforms, skel: Skeleton, x_obs: np.ndarray) -> np.ndarray:
    """Analytic skinning weights (N, B) of the nearest point on the posed capsule body"""
    points, _ = _points(x_obs)
    stack = transform_values(transforms)
    dist, closest = posed_capsule_distances(skel, stack, points)
    nearest = np.argmin(dist, axis=1)
    rows = np.arange(len(points))
    centre = closest[rows, nearest]
    offset = points - centre
    length = np.linalg.norm(offset, axis=1, keepdims=True)
    fallback_dir = np.tile([1.0, 0.0, 0.0], (len(points), 1))
    direction = np.where(length > 1e-12, offset / np.maximum(length, 1e-300), fallback_dir)
    surface = centre + direction * skel.capsule_radii[nearest][:, None]
    bone = stack[nearest]
    surface_canonical = np.einsum("nji,nj->ni", bone[:, :, :3], surface - bone[:, :, 3])
    return AnalyticSkinning(skel).weights(surface_canonical)


def approx_inverse_lbs(transforms: Transforms, skel: Skeleton, x_obs: np.ndarray,
                       strict: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Initial canonical guesses for observed points. The analytic weights of
    the nearest posed-body surface point define a blended transform that
    is inverted; singular blends fall back to the root bone's inverse
    (or raise when ``strict``). Returns the points and the fallback mask.
    """
    points, single = _points(x_obs)
    stack = transform_values(transforms)
    canonical, singular = invert_blend(nearest_body_weights(stack, skel, points), stack, points)
    if np.any(singular):
        if strict:
            raise SingularTransform("3 NUMERICAL: blended transform is singular at %d points"
                                    % int(singular.sum()))
        logger.warning("approx_inverse_lbs: %d singular blends, using the root bone inverse",
                       int(singular.sum()))
        root = stack[0]
        canonical[singular] = (points[singular] - root[:, 3]) @ root[:, :3]
    return (canonical[0] if single else canonical), singular


def observation_bounds(skel: Skeleton, transforms: Transforms,
                       margin: float = 0.25) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around the rigidly posed capsules"""
    p0, p1 = posed_capsules(skel, transforms)
    radii = np.concatenate([skel.capsule_radii, skel.capsule_radii])[:, None]
    ends = np.concatenate([p0, p1])
    return (ends - radii).min(axis=0) - margin, (ends + radii).max(axis=0) + margin


def rigid_inverse_inits(transforms: Transforms, skel: Skeleton, x_obs: np.ndarray,
                        count: int = 2) -> np.ndarray:
    """Canonical guesses (count, N, 3) from the rigid inverses of the nearest posed bones"""
    points, _ = _points(x_obs)
    stack = transform_values(transforms)
    dist, _ = posed_capsule_distances(skel, stack, points)
    order = np.argsort(dist, axis=1)[:, :count]
    out = np.zeros((count, len(points), 3))
    for k in range(min(count, len(skel))):
        bone = stack[order[:, k]]
        out[k] = np.einsum("nji,nj->ni", bone[:, :, :3], points - bone[:, :, 3])
    if count > len(skel):
        out[len(skel):] = out[len(skel) - 1]
    return out


######################################################################
#  P R E S E T S
######################################################################
# name, parent, offset from parent joint, capsule p0, capsule p1, radius
HUMANOID_TABLE = (
    ("pelvis", -1, (0.0, 0.0, 0.0), (-0.07, -0.04, 0.0), (0.07, -0.04, 0.0), 0.10),
    ("left_hip", 0, (0.09, -0.08, 0.0), (0.09, -0.10, 0.0), (0.09, -0.42, 0.0), 0.065),
    ("right_hip", 0, (-0.09, -0.08, 0.0), (-0.09, -0.10, 0.0), (-0.09, -0.42, 0.0), 0.065),
    ("spine1", 0, (0.0, 0.11, 0.0), (0.0, 0.03, 0.0), (0.0, 0.16, 0.0), 0.10),
    ("left_knee", 1, (0.0, -0.36, 0.0), (0.09, -0.46, 0.0), (0.09, -0.78, 0.0), 0.05),
    ("right_knee", 2, (0.0, -0.36, 0.0), (-0.09, -0.46, 0.0), (-0.09, -0.78, 0.0), 0.05),
    ("spine2", 3, (0.0, 0.13, 0.0), (0.0, 0.20, 0.0), (0.0, 0.28, 0.0), 0.11),
    ("left_ankle", 4, (0.0, -0.36, 0.0), (0.09, -0.82, 0.0), (0.09, -0.84, 0.08), 0.04),
    ("right_ankle", 5, (0.0, -0.36, 0.0), (-0.09, -0.82, 0.0), (-0.09, -0.84, 0.08), 0.04),
    ("spine3", 6, (0.0, 0.05, 0.0), (-0.06, 0.33, 0.0), (0.06, 0.33, 0.0), 0.11),
    ("left_foot", 7, (0.0, -0.05, 0.10), (0.09, -0.85, 0.10), (0.09, -0.85, 0.14), 0.03),
    ("right_foot", 8, (0.0, -0.05, 0.10), (-0.09, -0.85, 0.10), (-0.09, -0.85, 0.14), 0.03),
    ("neck", 9, (0.0, 0.20, 0.0), (0.0, 0.46, 0.0), (0.0, 0.54, 0.0), 0.045),
    ("left_collar", 9, (0.07, 0.12, 0.0), (0.04, 0.42, 0.0), (0.15, 0.44, 0.0), 0.05),
    ("right_collar", 9, (-0.07, 0.12, 0.0), (-0.04, 0.42, 0.0), (-0.15, 0.44, 0.0), 0.05),
    ("head", 12, (0.0, 0.09, 0.0), (0.0, 0.64, 0.0), (0.0, 0.70, 0.0), 0.10),
    ("left_shoulder", 13, (0.11, 0.03, 0.0), (0.20, 0.44, 0.0), (0.41, 0.44, 0.0), 0.045),
    ("right_shoulder", 14, (-0.11, 0.03, 0.0), (-0.20, 0.44, 0.0), (-0.41, 0.44, 0.0), 0.045),
    ("left_elbow", 16, (0.25, 0.0, 0.0), (0.45, 0.44, 0.0), (0.64, 0.44, 0.0), 0.038),
    ("right_elbow", 17, (-0.25, 0.0, 0.0), (-0.45, 0.44, 0.0), (-0.64, 0.44, 0.0), 0.038),
    ("left_wrist", 18, (0.23, 0.0, 0.0), (0.68, 0.44, 0.0), (0.74, 0.44, 0.0), 0.035),
    ("right_wrist", 19, (-0.23, 0.0, 0.0), (-0.68, 0.44, 0.0), (-0.74, 0.44, 0.0), 0.035),
    ("left_hand", 20, (0.08, 0.0, 0.0), (0.76, 0.44, 0.0), (0.80, 0.44, 0.0), 0.025),
    ("right_hand", 21, (-0.08, 0.0, 0.0), (-0.76, 0.44, 0.0), (-0.80, 0.44, 0.0), 0.025),
)


def toy_humanoid(tau: float = DEFAULT_TAU) -> Skeleton:
    """24-bone capsule figure standing inside [-1, 1]^3"""
    return Skeleton(tuple(Bone(parent, offset, Capsule(p0, p1, radius), name)
                          for name, parent, offset, p0, p1, radius in HUMANOID_TABLE), tau)


def sphere_body(radius: float = 1.0, tau: float = DEFAULT_TAU) -> Skeleton:
    """Single bone whose capsule degenerates to a sphere at the origin"""
    capsule = Capsule((0, 0, 0), (0, 0, 0), radius)
    return Skeleton((Bone(-1, (0.0, 0.0, 0.0), capsule, "body"),), tau)


def capsule_chain(count: int = 3, length: float = 0.5, radius: float = 0.12,
                  tau: float = DEFAULT_TAU) -> Skeleton:
    """Straight chain of ``count`` capsules along +x, root at x = -count*length/2"""
    start = -0.5 * count * length
    bones = []
    for i in range(count):
        offset = (start, 0.0, 0.0) if i == 0 else (length, 0.0, 0.0)
        x0 = start + i * length
        bones.append(Bone(i - 1, offset, Capsule((x0, 0, 0), (x0 + length, 0, 0), radius),
                          "link%d" % i))
    return Skeleton(tuple(bones), tau)


PRESETS = {
    "humanoid": toy_humanoid,
    "sphere": sphere_body,
    "chain": capsule_chain,
}


def random_pose(skel: Skeleton, rng: np.random.Generator, max_angle: float = 0.5,
                global_transform: Optional[RigidTransform] = None) -> Pose:
    """Joint rotations drawn uniformly inside a ball of radius ``max_angle``; root held fixed"""
    directions = rng.normal(size=(len(skel), 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    angles = max_angle * rng.uniform(0.0, 1.0, size=(len(skel), 1))
    rotations = directions * angles
    rotations[0] = 0.0
    return Pose(global_transform or RigidTransform.identity(), rotations, np.ones(len(skel)))


def pose_trajectory(skel: Skeleton, frames: int, rng: np.random.Generator,
                    amplitude: float = 0.5) -> List[Pose]:
    """Smooth periodic motion: each joint swings about a fixed random axis"""
    axes = rng.normal(size=(len(skel), 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=len(skel))
    poses = []
    for f in range(frames):
        angles = amplitude * np.sin(2.0 * math.pi * f / max(frames, 1) + phases)
        rotations = axes * angles[:, None]
        rotations[0] = 0.0
        poses.append(Pose(RigidTransform.identity(), rotations, np.ones(len(skel))))
    return poses
