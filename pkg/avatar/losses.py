'''
Training objectives

Photometric L1, Eikonal, off-surface, inside and skinning regularizers,
the surface-mode mask loss, and the point samplers that feed them. Each
regularizer is normalized by its own sample count.
'''

import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Tuple
import numpy as np
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.fields import AnalyticSdf, CanonicalSdf
from avatar.geom import RayBatch
from avatar.mlp import bind
from avatar.skeleton import SkinningField
from avatar.solver import PosedScene, SolverConfig, canonicalize_batch
from avatar.avatar_exception import InvalidArgument, NonFiniteValue, NumericalFailure

logger = logging.getLogger("avatar")

DOMAIN = (-1.0, 1.0)
OFFSURFACE_DISTANCE = 0.2
INSIDE_DEPTH = 0.01
OFFSURFACE_SHARPNESS = 100.0
INSIDE_SHARPNESS = 5000.0
MASK_ALPHA = 50.0
MASK_SAMPLES = 100
VOLUME_TERMS = ("color", "eikonal", "offsurface", "inside", "skinning")


@dataclass(frozen=True)
class LossWeights:
    color: float = 30.0
    eikonal: float = 50.0
    offsurface: float = 100.0
    inside: float = 10.0
    skinning: float = 10.0
    mask: float = 3000.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise InvalidArgument("2 VALIDATION: loss weight %s must be non-negative, got %s"
                                      % (name, value))

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskParams:
    """Sharpness alpha of the mask loss, learned as log alpha"""
    log_alpha: np.ndarray = field(default_factory=lambda: np.array([math.log(MASK_ALPHA)]))

    def __post_init__(self):
        self.log_alpha = np.asarray(self.log_alpha, dtype=np.float64).reshape(1)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def tensor(self, tape: Optional[Tape] = None) -> Tensor:
        return ad.exp(bind(self.log_alpha, tape, "mask.log_alpha"))

    def named_arrays(self) -> dict:
        return {"mask.log_alpha": self.log_alpha}


######################################################################
#  S A M P L E R S
######################################################################
def sample_box(rng: np.random.Generator, count: int, lo: float = DOMAIN[0],
               hi: float = DOMAIN[1]) -> np.ndarray:
    return rng.uniform(lo, hi, size=(count, 3))


def _rejection(rng: np.random.Generator, count: int, lo, hi, accept,
               what: str, max_rounds: int = 200) -> np.ndarray:
    found = []
    total = 0
    for _ in range(max_rounds):
        candidates = rng.uniform(lo, hi, size=(max(4 * count, 256), 3))
        keep = candidates[accept(candidates)]
        found.append(keep)
        total += len(keep)
        if total >= count:
            return np.concatenate(found)[:count]
    raise NumericalFailure("3 NUMERICAL: could not draw %d %s points (found %d)"
                           % (count, what, total))


def sample_offsurface(body: AnalyticSdf, rng: np.random.Generator, count: int,
                      min_distance: float = OFFSURFACE_DISTANCE) -> np.ndarray:
    """Points of the domain farther than ``min_distance`` outside the body"""
    return _rejection(rng, count, DOMAIN[0], DOMAIN[1],
                      lambda x: body.values(x) > min_distance, "off-surface")


def analytic_bounds(body: AnalyticSdf) -> Tuple[np.ndarray, np.ndarray]:
    ends = np.concatenate([body.p0, body.p1])
    radii = np.concatenate([body.radii, body.radii])[:, None]
    return (ends - radii).min(axis=0), (ends + radii).max(axis=0)


def sample_inside(body: AnalyticSdf, rng: np.random.Generator, count: int,
                  min_depth: float = INSIDE_DEPTH) -> np.ndarray:
    """Interior points at least ``min_depth`` below the surface"""
    lo, hi = analytic_bounds(body)
    return _rejection(rng, count, lo, hi, lambda x: body.values(x) < -min_depth, "inside")


def sample_surface(body: AnalyticSdf, rng: np.random.Generator, count: int,
                   iterations: int = 4) -> np.ndarray:
    """Random points on primitive surfaces, projected onto the blended zero set"""
    lengths = np.linalg.norm(body.p1 - body.p0, axis=1)
    area = 2.0 * math.pi * body.radii * lengths + 4.0 * math.pi * body.radii ** 2
    which = rng.choice(len(body.radii), size=count, p=area / area.sum())
    t = rng.uniform(size=(count, 1))
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    x = body.p0[which] + t * (body.p1[which] - body.p0[which]) \
        + direction * body.radii[which][:, None]
    for _ in range(iterations):
        s, grad = body.values_and_gradients(x)
        x = x - s[:, None] * grad
    return x


######################################################################
#  L O S S   T E R M S
######################################################################
def loss_color(pred, target: np.ndarray) -> Tensor:
    """Mean over pixels of the channel-summed absolute error"""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgument("2 VALIDATION: %s predictions for %s targets"
                              % (pred.shape, target.shape))
    if pred.shape[0] == 0:
        return Tensor(0.0)
    return ad.tsum(ad.tabs(pred - Tensor(target))) / pred.shape[0]


def loss_eikonal(sdf: CanonicalSdf, points: np.ndarray, cond=None, latent=None,
                 tape: Optional[Tape] = None) -> Tensor:
    """mean | |grad f| - 1 |"""
    out = sdf.evaluate(Tensor(points), cond, latent, tape, tangent=True)
    return ad.mean(ad.tabs(ad.norm(out.tangent, axis=0, eps=1e-30) - 1.0))


def loss_offsurface(sdf: CanonicalSdf, points: np.ndarray, cond=None, latent=None,
                    tape: Optional[Tape] = None) -> Tensor:
    """mean exp(-100 f)"""
    s = sdf.evaluate(Tensor(points), cond, latent, tape).s
    return ad.mean(ad.exp(s * (-OFFSURFACE_SHARPNESS)))


def loss_inside(sdf: CanonicalSdf, points: np.ndarray, cond=None, latent=None,
                tape: Optional[Tape] = None) -> Tensor:
    """mean sigmoid(5000 f)"""
    s = sdf.evaluate(Tensor(points), cond, latent, tape).s
    return ad.mean(ad.sigmoid(s * INSIDE_SHARPNESS))


def loss_skinning(skinning: SkinningField, points: np.ndarray, target: np.ndarray,
                  tape: Optional[Tape] = None) -> Tensor:
    """Mean over points of the L1 distance between predicted and reference weights"""
    weights = skinning.evaluate(Tensor(points), tape)[0]
    return ad.tsum(ad.tabs(weights - Tensor(target))) / len(points)


def min_sdf_along_rays(rays: RayBatch, scene: PosedScene, solver_cfg: SolverConfig,
                       rng: Optional[np.random.Generator], tape: Optional[Tape] = None,
                       samples: int = MASK_SAMPLES) -> Tuple[Tensor, np.ndarray]:
    """
    Smallest canonical SDF over uniform depth samples of each ray. The
    minimizing sample is re-evaluated differentiably; rays where no sample
    canonicalized are flagged in the returned mask.
    """
    count = len(rays)
    jitter = np.full((count, samples), 0.5) if rng is None else rng.uniform(size=(count, samples))
    depths = rays.d_min[:, None] + (rays.d_max - rays.d_min)[:, None] \
        * (np.arange(samples) + jitter) / samples
    x_obs = rays.at(depths).reshape(-1, 3)
    if scene.closed_form:
        x_can, ok = scene.canonical_closed_form(x_obs)
    else:
        solved = canonicalize_batch(x_obs, scene, scene.approx_inverse(x_obs), solver_cfg)
        x_can, ok = solved.x, solved.converged
    s = np.where(ok, scene.sdf_values(x_can), np.inf).reshape(count, samples)
    best = np.argmin(s, axis=1)
    found = np.isfinite(s[np.arange(count), best]) & rays.valid
    flat = np.arange(count) * samples + best
    canonical, keep = scene.canonical_tensor(x_can[flat], x_obs[flat], tape,
                                             solver_cfg.cond_cutoff)
    return scene.sdf_tensor(canonical, tape).s, found & keep


def loss_mask(min_sdf, occupancy: np.ndarray, alpha, total: int,
              outside: Optional[np.ndarray] = None) -> Tensor:
    """
    (1 / (alpha |P|)) sum over outside rays of BCE(O_p, sigmoid(-alpha min f)),
    written with softplus for stability
    """
    min_sdf = ad.as_tensor(min_sdf)
    alpha = ad.as_tensor(alpha)
    occupancy = np.asarray(occupancy, dtype=np.float64)
    outside = np.ones(len(occupancy), dtype=bool) if outside is None else outside
    if total <= 0 or not np.any(outside):
        return Tensor(0.0)
    logits = min_sdf * (-1.0) * alpha
    bce = ad.softplus(logits) - logits * Tensor(occupancy)
    picked = ad.where(outside, bce, 0.0)
    return ad.tsum(picked) / (alpha * float(total))


def total_loss(parts: Dict[str, Tensor], weights: LossWeights,
               surface_mode: bool = False) -> Tensor:
    """Weighted sum of the parts; the mask term only counts in surface mode"""
    names = VOLUME_TERMS + (("mask",) if surface_mode else ())
    total = Tensor(0.0)
    for name in names:
        part = parts.get(name)
        if part is None:
            continue
        part = ad.reshape(ad.as_tensor(part), ())
        if not np.all(np.isfinite(part.value)):
            raise NonFiniteValue("3 NUMERICAL: loss term %s is not finite (%s)"
                                 % (name, part.value))
        total = total + part * getattr(weights, name)
    return total
