'''
Canonical-space geometry and appearance fields

Every field takes points as tensors so that the same code serves plain
evaluation (no tape) and training (parameters watched on a tape). SDFs can
also return their spatial gradient, computed in the same pass.
'''

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import numpy as np
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.geom import normalize
from avatar.mlp import (Activation, MlpParams, bind, build_mlp, mlp_evaluate,
                        mlp_forward, spatial_tangent)
from avatar.skeleton import (AnalyticSkinning, SkinningField, Skeleton, Transforms,
                             blend, polar_rotation, segment_distances, segment_distances_np)
from avatar.avatar_exception import DegenerateBlend, ShapeMismatch, InvalidArgument

logger = logging.getLogger("avatar")

SMOOTH_MIN_K = 0.05
SDF_WIDTH = 256
SDF_DEPTH = 5
LATENT_DIM = 64
MAPPING_WIDTH = 256
COLOR_WIDTH = 256
AMBIENT = 0.35
LIGHT_DIRECTION = normalize(np.array([0.3, 0.8, 0.5]))


@dataclass
class SdfOutput:
    """Signed distances (N,), second-last-layer features (N, F) and gradients (N, 3)"""
    s: Tensor
    z: Optional[Tensor] = None
    tangent: Optional[Tensor] = None

    @property
    def gradient(self) -> Optional[Tensor]:
        """Spatial gradient as (N, 3)"""
        return None if self.tangent is None else ad.swapaxes(self.tangent, 0, 1)


def smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> Tuple[np.ndarray, np.ndarray]:
    """Polynomial smooth minimum and the blend factor h (weight of a in the gradient)"""
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return h * a + (1.0 - h) * b - k * h * (1.0 - h), h


class CanonicalSdf:
    """Signed distance in canonical space, optionally pose- and latent-conditioned"""
    feature_dim = 0
    cond_dim = 0

    def evaluate(self, x: Tensor, cond=None, latent=None, tape: Optional[Tape] = None,
                 tangent: bool = False) -> SdfOutput:
        raise NotImplementedError

    def values(self, x: np.ndarray, cond=None, latent=None) -> np.ndarray:
        return self.evaluate(Tensor(np.atleast_2d(x)), cond, latent).s.value

    def values_and_gradients(self, x: np.ndarray, cond=None,
                             latent=None) -> Tuple[np.ndarray, np.ndarray]:
        out = self.evaluate(Tensor(np.atleast_2d(x)), cond, latent, tangent=True)
        return out.s.value, out.gradient.value

    def named_arrays(self) -> dict:
        return {}


######################################################################
#  A N A L Y T I C   S D F
######################################################################
class AnalyticSdf(CanonicalSdf):
    """
    Union of capsules and spheres blended by a polynomial smooth minimum.
    Conditioning and latent inputs are ignored.
    """

    def __init__(self, p0: np.ndarray, p1: np.ndarray, radii: np.ndarray,
                 k: float = SMOOTH_MIN_K):
        self.p0 = np.asarray(p0, dtype=np.float64).reshape(-1, 3)
        self.p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(radii, dtype=np.float64).reshape(-1)
        if not len(self.p0) == len(self.p1) == len(self.radii) or len(self.radii) == 0:
            raise InvalidArgument("2 VALIDATION: analytic SDF needs matching primitive arrays")
        if np.any(self.radii <= 0) or k <= 0:
            raise InvalidArgument("2 VALIDATION: primitive radii and blend k must be positive")
        self.k = k

    @classmethod
    def sphere(cls, center=(0.0, 0.0, 0.0), radius: float = 1.0) -> "AnalyticSdf":
        return cls([center], [center], [radius])

    @classmethod
    def from_skeleton(cls, skel: Skeleton, k: float = SMOOTH_MIN_K,
                      spheres: Sequence[Tuple[Sequence[float], float]] = ()) -> "AnalyticSdf":
        p0 = [skel.capsule_p0] + [np.asarray([c]) for c, _ in spheres]
        p1 = [skel.capsule_p1] + [np.asarray([c]) for c, _ in spheres]
        radii = [skel.capsule_radii] + [np.asarray([r]) for _, r in spheres]
        return cls(np.concatenate(p0), np.concatenate(p1), np.concatenate(radii), k)

    def evaluate(self, x, cond=None, latent=None, tape=None, tangent=False):
        dist, grads = segment_distances(self.p0, self.p1, self.radii, x)
        value = dist[:, 0]
        grad = grads[:, 0, :] if tangent else None
        for j in range(1, len(self.radii)):
            other = dist[:, j]
            h = ad.clip(0.5 + 0.5 * (other - value) / self.k, 0.0, 1.0)
            if tangent:
                h_col = ad.expand_dims(h, -1)
                grad = h_col * grad + (1.0 - h_col) * grads[:, j, :]
            value = h * value + (1.0 - h) * other - self.k * h * (1.0 - h)
        return SdfOutput(value, None, ad.swapaxes(grad, 0, 1) if tangent else None)

    def values(self, x, cond=None, latent=None):
        """Straight numpy evaluation of the blend"""
        dist = segment_distances_np(self.p0, self.p1, self.radii, np.atleast_2d(x))
        value = dist[:, 0]
        for j in range(1, dist.shape[1]):
            value = smooth_min(value, dist[:, j], self.k)[0]
        return value

    def primitive_distances(self, x: np.ndarray) -> np.ndarray:
        return segment_distances_np(self.p0, self.p1, self.radii, np.atleast_2d(x))


######################################################################
#  N E U R A L   S D F
######################################################################
class MappingNetwork:
    """
    Latent code -> per-layer FiLM scales and offsets. The last layer starts
    at zero weights with bias (1, ..., 1, 0, ..., 0) so it is the identity.
    """

    def __init__(self, params: MlpParams, n_layers: int, width: int):
        if params.output_dim != 2 * n_layers * width:
            raise ShapeMismatch("2 VALIDATION: mapping network emits %d values, expected %d"
                                % (params.output_dim, 2 * n_layers * width))
        self.params = params
        self.n_layers = n_layers
        self.width = width

    @classmethod
    def create(cls, latent_dim: int, n_layers: int, width: int, rng: np.random.Generator,
               hidden: int = MAPPING_WIDTH) -> "MappingNetwork":
        params = build_mlp([latent_dim, hidden, hidden, 2 * n_layers * width],
                           Activation("relu"), rng, zero_final=True, name="mapping")
        params.layers[-1].bias[:n_layers * width] = 1.0
        return cls(params, n_layers, width)

    def film(self, latent, tape: Optional[Tape] = None) -> Sequence[Tuple[Tensor, Tensor]]:
        latent = ad.as_tensor(latent)
        if latent.ndim == 1:
            latent = ad.reshape(latent, (1, -1))
        out = mlp_forward(self.params, latent, tape)
        span = self.n_layers * self.width
        return [(out[:, i * self.width:(i + 1) * self.width],
                 out[:, span + i * self.width:span + (i + 1) * self.width])
                for i in range(self.n_layers)]

    def named_arrays(self) -> dict:
        return self.params.named_arrays()


class NeuralSdf(CanonicalSdf):
    """
    Sine network on (x, theta, beta); hidden layers are FiLM-modulated by
    the mapping network when one is attached
    """

    def __init__(self, params: MlpParams, cond_dim: int,
                 mapping: Optional[MappingNetwork] = None):
        if params.input_dim != 3 + cond_dim:
            raise ShapeMismatch("2 VALIDATION: SDF network takes %d inputs, expected 3 + %d"
                                % (params.input_dim, cond_dim))
        self.params = params
        self.cond_dim = cond_dim
        self.mapping = mapping
        self.feature_dim = params.layers[-1].in_dim

    @classmethod
    def create(cls, cond_dim: int, rng: np.random.Generator, width: int = SDF_WIDTH,
               depth: int = SDF_DEPTH, latent_dim: Optional[int] = LATENT_DIM) -> "NeuralSdf":
        params = build_mlp([3 + cond_dim] + [width] * depth + [1], Activation("sine"), rng,
                           name="sdf")
        mapping = MappingNetwork.create(latent_dim, depth, width, rng) if latent_dim else None
        return cls(params, cond_dim, mapping)

    def _inputs(self, x: Tensor, cond) -> Tensor:
        if self.cond_dim == 0:
            return x
        if cond is None:
            raise ShapeMismatch("2 VALIDATION: SDF expects %d conditioning values" % self.cond_dim)
        cond = ad.as_tensor(cond)
        if cond.shape[-1] != self.cond_dim:
            raise ShapeMismatch("2 VALIDATION: SDF expects %d conditioning values, got %d"
                                % (self.cond_dim, cond.shape[-1]))
        if cond.ndim == 1:
            cond = ad.broadcast_to(cond, (x.shape[0], self.cond_dim))
        return ad.concat([x, cond], axis=-1)

    def evaluate(self, x, cond=None, latent=None, tape=None, tangent=False):
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[-1] != 3:
            raise ShapeMismatch("2 VALIDATION: SDF points must be (N, 3), got %s" % (x.shape,))
        inputs = self._inputs(x, cond)
        film = None
        if self.mapping is not None and latent is not None:
            film = self.mapping.film(latent, tape)
        out = mlp_evaluate(self.params, inputs, tape,
                           spatial_tangent(x.shape[0], inputs.shape[-1]) if tangent else None,
                           film)
        s = ad.reshape(out.output, (x.shape[0],))
        grad = ad.reshape(out.tangent, (3, x.shape[0])) if tangent else None
        return SdfOutput(s, out.features, grad)

    def named_arrays(self) -> dict:
        arrays = dict(self.params.named_arrays())
        if self.mapping is not None:
            arrays.update(self.mapping.named_arrays())
        return arrays


def sdf_eval(sdf: CanonicalSdf, x: np.ndarray, cond=None, latent=None) -> SdfOutput:
    """Single-point or batched evaluation without a tape"""
    return sdf.evaluate(Tensor(np.atleast_2d(x)), cond, latent)


def sdf_grad(sdf: CanonicalSdf, x: np.ndarray, cond=None, latent=None) -> np.ndarray:
    """Spatial gradient; (3,) for a single point, (N, 3) for a batch"""
    x = np.asarray(x, dtype=np.float64)
    grad = sdf.values_and_gradients(x, cond, latent)[1]
    return grad[0] if x.ndim == 1 else grad


######################################################################
#  N O R M A L S
######################################################################
def normals_observation(weights: np.ndarray, transforms: Transforms,
                        canonical_normals) -> Tuple[Tensor, np.ndarray]:
    """
    Rotates canonical normals (N, 3) by the polar factor of the blended
    3x3 block. The rotation is a constant; gradients reach the result only
    through ``canonical_normals``. Also returns the degenerate-blend mask.
    """
    rot, degenerate = polar_rotation(blend(weights, transforms)[:, :, :3])
    rotated = ad.matvec(Tensor(rot), ad.as_tensor(canonical_normals))
    return rotated / ad.norm(rotated, axis=-1, keepdims=True, eps=1e-30), degenerate


def normal_observation(field: SkinningField, transforms: Transforms, x: np.ndarray,
                       canonical_normal: np.ndarray) -> np.ndarray:
    """n = normalize(Rot(sum_b w_b(x) B_b) n_canonical) for one point"""
    weights = field.weights(np.atleast_2d(x))
    normal, degenerate = normals_observation(weights, transforms,
                                             np.atleast_2d(canonical_normal))
    if degenerate[0]:
        raise DegenerateBlend("3 NUMERICAL: blended rotation is degenerate at %s" % (x,))
    return normal.value[0]


######################################################################
#  C O L O R
######################################################################
class ColorField:
    """rgb in [0, 1] from (x, n, v, z, Z)"""

    def evaluate(self, x, normals, view, features=None, latent=None,
                 tape: Optional[Tape] = None) -> Tensor:
        raise NotImplementedError

    def named_arrays(self) -> dict:
        return {}


class ColorNet(ColorField):
    """4 x 256 relu network, input re-joined before the fourth layer, sigmoid head"""

    def __init__(self, params: MlpParams, feature_dim: int, latent_dim: int):
        if params.input_dim != 9 + feature_dim + latent_dim:
            raise ShapeMismatch("2 VALIDATION: color network takes %d inputs, expected %d"
                                % (params.input_dim, 9 + feature_dim + latent_dim))
        self.params = params
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim

    @classmethod
    def create(cls, feature_dim: int, latent_dim: int, rng: np.random.Generator,
               width: int = COLOR_WIDTH, zero_final: bool = False) -> "ColorNet":
        params = build_mlp([9 + feature_dim + latent_dim] + [width] * 4 + [3],
                           Activation("relu"), rng, final_activation=Activation("sigmoid"),
                           skip_layers=(3,), zero_final=zero_final, name="color")
        return cls(params, feature_dim, latent_dim)

    def evaluate(self, x, normals, view, features=None, latent=None, tape=None):
        x = ad.as_tensor(x)
        count = x.shape[0]
        parts = [x, ad.as_tensor(normals), ad.as_tensor(view)]
        if self.feature_dim:
            if features is None or features.shape[-1] != self.feature_dim:
                raise ShapeMismatch("2 VALIDATION: color network expects %d SDF features"
                                    % self.feature_dim)
            parts.append(features)
        if self.latent_dim:
            latent = ad.as_tensor(np.zeros(self.latent_dim) if latent is None else latent)
            if latent.shape[-1] != self.latent_dim:
                raise ShapeMismatch("2 VALIDATION: color network expects a %d-dim latent, got %s"
                                    % (self.latent_dim, latent.shape))
            if latent.ndim == 1:
                latent = ad.broadcast_to(latent, (count, self.latent_dim))
            parts.append(latent)
        for part in parts:
            if part.shape[0] != count:
                raise ShapeMismatch("2 VALIDATION: color inputs disagree on the point count")
        return mlp_forward(self.params, ad.concat(parts, axis=-1), tape)

    def named_arrays(self) -> dict:
        return self.params.named_arrays()


class ConstantColor(ColorField):
    def __init__(self, rgb=(0.5, 0.5, 0.5)):
        self.rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)

    def evaluate(self, x, normals, view, features=None, latent=None, tape=None):
        return Tensor(np.broadcast_to(self.rgb, (ad.as_tensor(x).shape[0], 3)).copy())


class AnalyticColor(ColorField):
    """
    Per-bone albedo blended by the analytic skinning weights, lit by a fixed
    directional light in observation space with an ambient floor
    """

    def __init__(self, skel: Skeleton, albedo: np.ndarray, ambient: float = AMBIENT,
                 light=LIGHT_DIRECTION):
        albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
        if len(albedo) != len(skel):
            raise ShapeMismatch("2 VALIDATION: %d albedo colors for %d bones"
                                % (len(albedo), len(skel)))
        self.skinning = AnalyticSkinning(skel)
        self.albedo = np.clip(albedo, 0.0, 1.0)
        self.ambient = ambient
        self.light = normalize(np.asarray(light, dtype=np.float64))

    @classmethod
    def palette(cls, skel: Skeleton, seed: int = 0) -> "AnalyticColor":
        rng = np.random.default_rng(seed)
        return cls(skel, rng.uniform(0.25, 0.95, size=(len(skel), 3)))

    def evaluate(self, x, normals, view, features=None, latent=None, tape=None):
        weights = self.skinning.evaluate(x)[0]
        base = weights @ Tensor(self.albedo)
        lambert = ad.relu(ad.dot(ad.as_tensor(normals), Tensor(self.light), keepdims=True))
        return base * (self.ambient + (1.0 - self.ambient) * lambert)

    def shade_values(self, x: np.ndarray, normals: np.ndarray) -> np.ndarray:
        return self.evaluate(Tensor(x), Tensor(normals), None).value


def color_eval(net: ColorField, x, n, v, z=None, latent=None) -> np.ndarray:
    """rgb for a single point (3,) or a batch (N, 3)"""
    single = np.ndim(x) == 1
    out = net.evaluate(Tensor(np.atleast_2d(x)), Tensor(np.atleast_2d(n)),
                       Tensor(np.atleast_2d(v)),
                       None if z is None else Tensor(np.atleast_2d(z)), latent).value
    return out[0] if single else out


def bind_latent(latents: np.ndarray, frame: int, tape: Optional[Tape]) -> Tensor:
    """One row of the latent table; with a tape only that row receives gradient"""
    if latents.shape[0] == 0:
        return Tensor(np.zeros(latents.shape[1]))
    return bind(latents, tape)[frame]
