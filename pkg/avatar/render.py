'''
Volume and surface rendering of posed SDF avatars

Rays that hit the body get 16 samples in a +-5cm band around the surface,
16 between the near bound and that band, and the surface point itself;
missed rays get 64 uniform samples. Every sample is canonicalized, turned
into a density by the Laplace CDF of the negated SDF and composited with
the usual quadrature. The surface mode colors the root point only.
'''

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union
import numpy as np
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.fields import ColorField, normals_observation
from avatar.geom import Camera, Image, Ray, RayBatch, camera_ray_batch
from avatar.mlp import bind
from avatar.skeleton import observation_bounds
from avatar.solver import (PosedScene, RootBatch, RootResult, SolverConfig, canonicalize_batch,
                           counters, find_surface_batch, implicit_grad_joint, joint_jacobian,
                           OperationCounters)
from avatar.avatar_exception import InvalidArgument

logger = logging.getLogger("avatar")

DEFAULT_B = 0.1
SURFACE_BAND = 0.05
RENDER_MODES = ("volume", "surface")
SAMPLING_MODES = ("hybrid", "uniform")


######################################################################
#  D E N S I T Y
######################################################################
@dataclass
class DensityParams:
    """Laplace scale b, stored and learned as log b"""
    log_b: np.ndarray = field(default_factory=lambda: np.array([math.log(DEFAULT_B)]))

    def __post_init__(self):
        self.log_b = np.asarray(self.log_b, dtype=np.float64).reshape(1)
        if not np.isfinite(self.log_b[0]):
            raise InvalidArgument("2 VALIDATION: density scale must be finite")

    @classmethod
    def from_b(cls, b: float) -> "DensityParams":
        if not b > 0:
            raise InvalidArgument("2 VALIDATION: density scale b must be positive, got %s" % b)
        return cls(np.array([math.log(b)]))

    @property
    def b(self) -> float:
        return float(np.exp(self.log_b[0]))

    def tensor(self, tape: Optional[Tape] = None) -> Tensor:
        return ad.exp(bind(self.log_b, tape, "density.log_b"))

    def named_arrays(self) -> dict:
        return {"density.log_b": self.log_b}


def sdf_to_density(s, params: Union[DensityParams, float]):
    """sigma = (1/b) (1/2 + 1/2 sign(-s) (1 - exp(-|s|/b))), with sign(0) = 0"""
    b = params.b if isinstance(params, DensityParams) else float(params)
    if not b > 0:
        raise InvalidArgument("2 VALIDATION: density scale b must be positive, got %s" % b)
    s = np.asarray(s, dtype=np.float64)
    sigma = (0.5 + 0.5 * np.sign(-s) * (1.0 - np.exp(-np.abs(s) / b))) / b
    return float(sigma) if sigma.ndim == 0 else sigma


def density_tensor(s: Tensor, b: Tensor) -> Tensor:
    """Differentiable form of :func:`sdf_to_density`"""
    s = ad.as_tensor(s)
    e = ad.exp(-ad.tabs(s) / b)
    return ad.where(s.value > 0, 0.5 * e, 1.0 - 0.5 * e) / b


######################################################################
#  C O N F I G U R A T I O N
######################################################################
@dataclass(frozen=True)
class RenderConfig:
    mode: str = "volume"
    sampling: str = "hybrid"
    near_samples: int = 16
    far_samples: int = 16
    uniform_samples: int = 64
    band: float = SURFACE_BAND
    b_init: float = DEFAULT_B
    stratified: bool = True
    chunk_size: int = 1024
    margin: float = 0.25

    def __post_init__(self):
        if self.mode not in RENDER_MODES:
            raise InvalidArgument("2 VALIDATION: render mode must be one of %s, got %s"
                                  % (RENDER_MODES, self.mode))
        if self.sampling not in SAMPLING_MODES:
            raise InvalidArgument("2 VALIDATION: sampling must be one of %s, got %s"
                                  % (SAMPLING_MODES, self.sampling))
        if min(self.near_samples, self.far_samples, self.uniform_samples, self.chunk_size) < 1:
            raise InvalidArgument("2 VALIDATION: sample counts and chunk size must be positive")
        if not (self.band > 0 and self.b_init > 0 and self.margin >= 0):
            raise InvalidArgument("2 VALIDATION: band and b_init must be positive")

    @property
    def hit_samples(self) -> int:
        return self.near_samples + self.far_samples + 1


@dataclass
class Shading:
    """
    Appearance side of a model: color field and density scale. The optional
    ``view_augment`` maps (view directions, normals) to perturbed directions.
    """
    color: ColorField
    density: DensityParams
    view_augment: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


######################################################################
#  S A M P L I N G
######################################################################
@dataclass
class RaySampleSet:
    """Ordered depths along one ray with their canonical points"""
    depths: np.ndarray
    points: np.ndarray
    converged: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        if len(self.depths) > 1 and not np.all(np.diff(self.depths) > 0):
            raise InvalidArgument("2 VALIDATION: sample depths must be strictly increasing")

    def __len__(self) -> int:
        return len(self.depths)


@dataclass
class SampleBatch:
    """
    Samples for many rays padded to a common width; padding sits at d_max
    with ``valid`` false and zero spacing
    """
    depths: np.ndarray
    valid: np.ndarray
    points: np.ndarray
    converged: np.ndarray
    deltas: np.ndarray
    surface_hit: np.ndarray

    def __len__(self) -> int:
        return len(self.depths)

    @property
    def usable(self) -> np.ndarray:
        return self.valid & self.converged

    def ray(self, i: int) -> RaySampleSet:
        keep = self.valid[i]
        return RaySampleSet(self.depths[i][keep], self.points[i][keep],
                            self.converged[i][keep], self.deltas[i][keep])


def stratified(lo: np.ndarray, hi: np.ndarray, count: int,
               rng: Optional[np.random.Generator]) -> np.ndarray:
    """One jittered depth per equal bin of [lo, hi] (bin centers without an rng)"""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    jitter = np.full(lo.shape + (count,), 0.5) if rng is None else rng.uniform(
        size=lo.shape + (count,))
    return lo[..., None] + (hi - lo)[..., None] * (np.arange(count) + jitter) / count


def sample_depths(rays: RayBatch, hit: np.ndarray, surface: np.ndarray, cfg: RenderConfig,
                  rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted depths (N, S) and their validity mask"""
    if np.any(rays.valid & ~np.isfinite(rays.d_max)):
        raise InvalidArgument("2 VALIDATION: volume sampling needs bounded rays")
    count = len(rays)
    hit = hit & rays.valid
    uniform = rays.valid & ~hit
    width = cfg.uniform_samples if np.any(uniform) else cfg.hit_samples
    width = max(width, cfg.hit_samples if np.any(hit) else 0)
    far_end = np.where(rays.valid, rays.d_max, rays.d_min)
    depths = np.repeat(far_end[:, None], width, axis=1)
    valid = np.zeros((count, width), dtype=bool)

    idx = np.nonzero(uniform)[0]
    if idx.size:
        depths[idx, :cfg.uniform_samples] = stratified(rays.d_min[idx], rays.d_max[idx],
                                                       cfg.uniform_samples, rng)
        valid[idx, :cfg.uniform_samples] = True

    idx = np.nonzero(hit)[0]
    if idx.size:
        d_star = surface[idx]
        d_min, d_max = rays.d_min[idx], rays.d_max[idx]
        near_lo = np.maximum(d_star - cfg.band, d_min)
        near_hi = np.minimum(d_star + cfg.band, d_max)
        merged = d_star - cfg.band <= d_min
        banded = np.concatenate([stratified(d_min, d_star - cfg.band, cfg.far_samples, rng),
                                 stratified(near_lo, near_hi, cfg.near_samples, rng)], axis=1)
        pooled = stratified(near_lo, near_hi, cfg.near_samples + cfg.far_samples, rng)
        chosen = np.where(merged[:, None], pooled, banded)
        ordered = np.sort(np.concatenate([chosen, d_star[:, None]], axis=1), axis=1)
        depths[idx, :cfg.hit_samples] = ordered
        valid[idx, :cfg.hit_samples] = True
    return depths, valid


def sample_spacing(depths: np.ndarray, rays: RayBatch) -> np.ndarray:
    """delta_i = d_(i+1) - d_i with d_max closing the last interval"""
    far_end = np.where(rays.valid, rays.d_max, rays.d_min)
    return np.diff(np.concatenate([depths, far_end[:, None]], axis=1), axis=1)


def sample_ray_batch(rays: RayBatch, roots: Optional[RootBatch], scene: PosedScene,
                     cfg: RenderConfig, solver_cfg: SolverConfig,
                     rng: Optional[np.random.Generator] = None) -> SampleBatch:
    """Depth samples for every ray, each canonicalized"""
    count = len(rays)
    if roots is None or cfg.sampling == "uniform":
        hit, surface = np.zeros(count, dtype=bool), np.zeros(count)
    else:
        hit, surface = roots.hit, roots.d
    depths, valid = sample_depths(rays, hit, surface, cfg, rng)
    points = np.zeros(depths.shape + (3,))
    converged = np.zeros(depths.shape, dtype=bool)
    if np.any(valid):
        x_obs = rays.at(depths)[valid]
        if scene.closed_form:
            x_can, ok = scene.canonical_closed_form(x_obs)
        else:
            solved = canonicalize_batch(x_obs, scene, scene.approx_inverse(x_obs), solver_cfg)
            x_can, ok = solved.x, solved.converged
        points[valid] = x_can
        converged[valid] = ok
        failed = int((~ok).sum())
        if failed:
            logger.debug("%d of %d samples failed to canonicalize", failed, len(ok))
    return SampleBatch(depths, valid, points, converged, sample_spacing(depths, rays), hit)


def sample_ray(ray: Ray, root: Optional[RootResult], scene: PosedScene, cfg: RenderConfig,
               solver_cfg: SolverConfig, rng: Optional[np.random.Generator] = None) -> RaySampleSet:
    """Single-ray form; ``root`` is None (or not converged) for a miss"""
    roots = None
    if root is not None and root.converged:
        roots = RootBatch(root.x[None], np.array([root.d]), np.array([True]),
                          np.array([root.iterations]), np.array([root.residual]),
                          np.array([True]))
    batch = sample_ray_batch(RayBatch.from_rays([ray]), roots, scene, cfg, solver_cfg, rng)
    return batch.ray(0)


######################################################################
#  Q U A D R A T U R E
######################################################################
def composite(sigma: Tensor, deltas: np.ndarray, colors: Tensor) -> Tuple[Tensor, Tensor]:
    """
    C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i with
    T_i = exp(-sum_(j<i) sigma_j delta_j). Returns (rgb (N, 3), weights (N, S)).
    """
    optical = ad.as_tensor(sigma) * Tensor(deltas)
    alpha = 1.0 - ad.exp(-optical)
    count = optical.shape[0]
    before = ad.concat([Tensor(np.zeros((count, 1))), ad.cumsum(optical[:, :-1], axis=1)],
                       axis=1)
    weights = ad.exp(-before) * alpha
    rgb = ad.tsum(ad.expand_dims(weights, -1) * ad.as_tensor(colors), axis=1)
    return rgb, weights


def volume_render(ray: Ray, samples: RaySampleSet, scene: PosedScene, shading: Shading,
                  tape: Optional[Tape] = None, cond_cutoff: float = 1e8) -> Tensor:
    """Color (3,) of one ray from its sample set"""
    batch = SampleBatch(samples.depths[None], np.ones((1, len(samples)), dtype=bool),
                        samples.points[None], samples.converged[None], samples.deltas[None],
                        np.zeros(1, dtype=bool))
    rgb, _ = shade_samples(RayBatch.from_rays([ray]), batch, scene, shading, tape, cond_cutoff)
    return rgb[0]


def _scatter(flat: Tensor, mask: np.ndarray) -> Tensor:
    """Places rows of ``flat`` at the true entries of ``mask``; zeros elsewhere"""
    flat = ad.as_tensor(flat)
    padded = ad.concat([flat, Tensor(np.zeros((1,) + flat.shape[1:]))], axis=0)
    index = np.full(mask.shape, flat.shape[0])
    index[mask] = np.arange(flat.shape[0])
    return padded[index]


def shade_points(x_can: Tensor, x_star: np.ndarray, x_obs: np.ndarray, view: np.ndarray,
                 scene: PosedScene, shading: Shading,
                 tape: Optional[Tape]) -> Tuple[Tensor, Tensor, np.ndarray]:
    """SDF values, colors and the degenerate-normal mask at canonical points"""
    out = scene.sdf_tensor(x_can, tape, tangent=True)
    weights = scene.blend_weights(x_star, x_obs)
    normals, degenerate = normals_observation(weights, scene.transforms, out.gradient)
    if shading.view_augment is not None:
        view = shading.view_augment(view, normals.value)
    colors = shading.color.evaluate(x_can, normals, Tensor(view), out.z, scene.latent, tape)
    return out.s, colors, degenerate


def shade_samples(rays: RayBatch, samples: SampleBatch, scene: PosedScene, shading: Shading,
                  tape: Optional[Tape] = None,
                  cond_cutoff: float = 1e8) -> Tuple[Tensor, Tensor]:
    """Volume-rendered colors (N, 3) and quadrature weights (N, S)"""
    usable = samples.usable
    count, width = samples.depths.shape
    if not np.any(usable):
        return Tensor(np.zeros((count, 3))), Tensor(np.zeros((count, width)))
    ray_index = np.nonzero(usable)[0]
    x_star = samples.points[usable]
    x_obs = rays.at(samples.depths)[usable]
    x_can, keep = scene.canonical_tensor(x_star, x_obs, tape, cond_cutoff)
    s, colors, degenerate = shade_points(x_can, x_star, x_obs, rays.directions[ray_index],
                                         scene, shading, tape)
    keep = keep & ~degenerate
    sigma = ad.where(keep, density_tensor(s, shading.density.tensor(tape)), 0.0)
    return composite(_scatter(sigma, usable), samples.deltas, _scatter(colors, usable))


def surface_shade(rays: RayBatch, roots: RootBatch, scene: PosedScene, shading: Shading,
                  tape: Optional[Tape] = None, cond_cutoff: float = 1e8) -> Tensor:
    """Color at each converged root (zero background), differentiable through the root"""
    count = len(rays)
    hit = roots.hit
    if not np.any(hit):
        return Tensor(np.zeros((count, 3)))
    idx = np.nonzero(hit)[0]
    x_star = roots.x[idx]
    x_obs = rays.at(roots.d)[idx]
    if scene.closed_form:
        x_can, keep = scene.canonical_tensor(x_star, x_obs, tape, cond_cutoff)
    else:
        sub = rays.subset(idx)
        jacobian = joint_jacobian(scene, x_star, sub.directions)
        x_can, _, keep = implicit_grad_joint(x_star, roots.d[idx], jacobian, sub, scene, tape,
                                             cond_cutoff)
    _, colors, degenerate = shade_points(x_can, x_star, x_obs, rays.directions[idx], scene,
                                         shading, tape)
    keep = keep & ~degenerate
    return _scatter(ad.where(keep[:, None], colors, 0.0), hit)


def surface_render(ray: Ray, scene: PosedScene, shading: Shading, solver_cfg: SolverConfig,
                   tape: Optional[Tape] = None) -> Tensor:
    rays = RayBatch.from_rays([ray])
    roots = find_surface_batch(rays, scene, solver_cfg)
    return surface_shade(rays, roots, scene, shading, tape, solver_cfg.cond_cutoff)[0]


######################################################################
#  R E N D E R I N G
######################################################################
@dataclass
class RenderOutput:
    rgb: Tensor
    hit: np.ndarray
    roots: RootBatch
    weights: Optional[Tensor] = None

    @property
    def opacity(self) -> np.ndarray:
        if self.weights is None:
            return self.hit.astype(np.float64)
        return self.weights.value.sum(axis=1)


def render_rays(rays: RayBatch, scene: PosedScene, shading: Shading, cfg: RenderConfig,
                solver_cfg: SolverConfig, rng: Optional[np.random.Generator] = None,
                tape: Optional[Tape] = None) -> RenderOutput:
    """Full per-ray pipeline: root finding, then sampling and compositing or surface shading"""
    roots = find_surface_batch(rays, scene, solver_cfg)
    if cfg.mode == "surface":
        rgb = surface_shade(rays, roots, scene, shading, tape, solver_cfg.cond_cutoff)
        return RenderOutput(rgb, roots.hit.copy(), roots)
    samples = sample_ray_batch(rays, roots, scene, cfg, solver_cfg,
                               rng if cfg.stratified else None)
    rgb, weights = shade_samples(rays, samples, scene, shading, tape, solver_cfg.cond_cutoff)
    return RenderOutput(rgb, roots.hit.copy(), roots, weights)


def scene_rays(cam: Camera, scene: PosedScene, margin: float) -> RayBatch:
    """Pixel rays bounded by the box around the posed body"""
    lo, hi = observation_bounds(scene.skel, scene.transforms, margin)
    return camera_ray_batch(cam, lo, hi)


def _render_chunk(job) -> Tuple[np.ndarray, np.ndarray, OperationCounters]:
    rays, scene, shading, cfg, solver_cfg, seed, chunk = job
    before = OperationCounters(**counters().as_dict())
    out = render_rays(rays, scene, shading, cfg, solver_cfg,
                      np.random.default_rng([seed, chunk]))
    return out.rgb.value, out.hit, counters().minus(before)


def render_image(cam: Camera, scene: PosedScene, shading: Shading, cfg: RenderConfig,
                 solver_cfg: SolverConfig, seed: int = 0, threads: int = 1) -> Image:
    """
    Renders every pixel. Rays are split into fixed chunks, each with its
    own seeded generator, so the image does not depend on ``threads``.
    The mask is the surface-hit flag.
    """
    rays = scene_rays(cam, scene, cfg.margin)
    starts = list(range(0, len(rays), cfg.chunk_size))
    jobs = [(rays.subset(slice(start, start + cfg.chunk_size)), scene, shading, cfg, solver_cfg,
             seed, i) for i, start in enumerate(starts)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results: List = list(pool.map(_render_chunk, jobs))
    else:
        results = [_render_chunk(job) for job in jobs]
    total = counters()
    if threads > 1:
        for _, _, used in results:
            total.merge(used)
    rgb = np.concatenate([r[0] for r in results]) if results else np.zeros((0, 3))
    hit = np.concatenate([r[1] for r in results]) if results else np.zeros(0, dtype=bool)
    logger.debug("Rendered %dx%d image, %d of %d rays hit", cam.width, cam.height,
                 int(hit.sum()), len(hit))
    return Image.from_flat(cam, rgb, hit)
