'''
Surface finding and canonicalization

Every solver works on batches of rays or points. The joint solver finds
the ray depth and the canonical correspondence together, as the root of

    g(x, d) = [ f(x) ; LBS(x) - (c + v d) ]

with a Jacobian evaluated exactly once and then updated by rank-one
Broyden steps. Naive alternation and a bracketing secant search are kept
as baselines, and the implicit-gradient helpers turn converged roots into
differentiable samples without differentiating through the iterations.
'''

import logging
import threading
from dataclasses import dataclass, asdict
from typing import Callable, List, Optional, Tuple
import numpy as np
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.fields import CanonicalSdf, SdfOutput
from avatar.geom import Ray, RayBatch
from avatar.skeleton import (BackwardSkinning, BoneTransforms, Pose, Skeleton, SkinningField,
                             approx_inverse_lbs, forward_lbs_tensor, lbs_points,
                             lbs_with_jacobian, nearest_body_weights, rigid_inverse_inits,
                             transform_stack)
from avatar.avatar_exception import InvalidArgument, NumericalFailure

logger = logging.getLogger("avatar")

SKINNING_MODES = ("forward", "backward", "nearest")


######################################################################
#  C O N F I G U R A T I O N   A N D   C O U N T E R S
######################################################################
@dataclass(frozen=True)
class SolverConfig:
    eps: float = 1e-5
    max_iterations: int = 50
    max_steps: int = 30
    hit_threshold: float = 5e-3
    damping_halvings: int = 5
    cond_cutoff: float = 1e8
    n_inits: int = 1
    exact_jacobian: bool = False

    def __post_init__(self):
        if not (self.eps > 0 and self.hit_threshold > 0 and self.cond_cutoff > 0):
            raise InvalidArgument("2 VALIDATION: solver tolerances must be positive")
        if self.max_iterations < 1 or self.max_steps < 1 or self.damping_halvings < 0:
            raise InvalidArgument("2 VALIDATION: solver iteration limits must be positive")
        if self.eps >= self.hit_threshold:
            raise InvalidArgument("2 VALIDATION: eps (%s) must be below the hit threshold (%s)"
                                  % (self.eps, self.hit_threshold))
        if self.n_inits not in (1, 3):
            raise InvalidArgument("2 VALIDATION: n_inits must be 1 or 3, got %s" % self.n_inits)

    def with_overrides(self, **changes) -> "SolverConfig":
        values = asdict(self)
        values.update(changes)
        return SolverConfig(**values)


@dataclass
class OperationCounters:
    """Per-thread tallies; ``lbs_evals`` counts point-wise LBS residual evaluations"""
    sdf_evals: int = 0
    lbs_evals: int = 0
    jacobian_evals: int = 0
    canonical_solves: int = 0
    joint_solves: int = 0

    def merge(self, other: "OperationCounters") -> None:
        for key, value in other.as_dict().items():
            setattr(self, key, getattr(self, key) + value)

    def minus(self, before: "OperationCounters") -> "OperationCounters":
        """Tallies accumulated since the snapshot ``before``"""
        return OperationCounters(**{key: value - getattr(before, key)
                                    for key, value in self.as_dict().items()})

    def reset(self) -> None:
        for key in self.as_dict():
            setattr(self, key, 0)

    @property
    def solves(self) -> int:
        """Canonicalize-equivalent solves: one per canonicalization or joint solve"""
        return self.canonical_solves + self.joint_solves

    def as_dict(self) -> dict:
        return asdict(self)


_local = threading.local()


def counters() -> OperationCounters:
    """This thread's counters"""
    if not hasattr(_local, "counters"):
        _local.counters = OperationCounters()
    return _local.counters


######################################################################
#  R E S U L T S
######################################################################
@dataclass(frozen=True)
class RootResult:
    """One solved ray (or point); a converged result satisfies its tolerance"""
    x: np.ndarray
    d: float
    converged: bool
    iterations: int
    residual: float
    tolerance: float = np.inf

    def __post_init__(self):
        if self.converged and not self.residual <= self.tolerance:
            raise NumericalFailure("3 NUMERICAL: converged root has residual %s above %s"
                                   % (self.residual, self.tolerance))


@dataclass
class RootBatch:
    """
    Solutions for a batch. ``residual`` is the max of the SDF and
    correspondence residual norms; ``hit`` marks converged in-bounds roots.
    """
    x: np.ndarray
    d: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    hit: np.ndarray
    tolerance: float = np.inf
    history: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.d)

    def result(self, i: int) -> RootResult:
        return RootResult(self.x[i].copy(), float(self.d[i]), bool(self.converged[i]),
                          int(self.iterations[i]), float(self.residual[i]), self.tolerance)

    @classmethod
    def empty(cls, count: int, tolerance: float = np.inf) -> "RootBatch":
        return cls(np.zeros((count, 3)), np.zeros(count), np.zeros(count, dtype=bool),
                   np.zeros(count, dtype=int), np.full(count, np.inf),
                   np.zeros(count, dtype=bool), tolerance)

    def assign(self, index: np.ndarray, other: "RootBatch") -> None:
        self.x[index] = other.x
        self.d[index] = other.d
        self.converged[index] = other.converged
        self.iterations[index] = other.iterations
        self.residual[index] = other.residual
        self.hit[index] = other.hit


######################################################################
#  P O S E D   S C E N E
######################################################################
@dataclass
class PosedScene:
    """
    Everything a solver needs for one frame: canonical SDF with its
    conditioning, the skinning field and the bone transforms. The
    ``transforms_param`` and ``cond_param`` tensors, when set, make implicit
    gradients reach the pose.
    """
    skel: Skeleton
    sdf: CanonicalSdf
    skinning: SkinningField
    transforms: BoneTransforms
    cond: Optional[np.ndarray] = None
    latent: Optional[object] = None
    mode: str = "forward"
    backward: Optional[BackwardSkinning] = None
    pose: Optional[Pose] = None
    transforms_param: Optional[Tensor] = None
    cond_param: Optional[Tensor] = None

    def __post_init__(self):
        if self.mode not in SKINNING_MODES:
            raise InvalidArgument("2 VALIDATION: unknown skinning mode %s" % self.mode)
        if self.mode == "backward" and (self.backward is None or self.pose is None):
            raise InvalidArgument("2 VALIDATION: backward skinning needs its network and the pose")

    @property
    def latent_value(self) -> Optional[np.ndarray]:
        return None if self.latent is None else ad.value_of(self.latent)

    @property
    def closed_form(self) -> bool:
        return self.mode != "forward"

    def sdf_values(self, x: np.ndarray) -> np.ndarray:
        counters().sdf_evals += len(x)
        return self.sdf.values(x, self.cond, self.latent_value)

    def sdf_values_and_grads(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        counters().sdf_evals += len(x)
        return self.sdf.values_and_gradients(x, self.cond, self.latent_value)

    def lbs(self, x: np.ndarray) -> np.ndarray:
        counters().lbs_evals += len(x)
        return lbs_points(self.skinning, self.transforms, x)

    def lbs_with_jacobian(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        counters().jacobian_evals += len(x)
        return lbs_with_jacobian(self.skinning, self.transforms, x)

    def approx_inverse(self, x_obs: np.ndarray) -> np.ndarray:
        return approx_inverse_lbs(self.transforms, self.skel, x_obs)[0]

    def canonical_closed_form(self, x_obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Canonical points for the backward and nearest modes, with a validity mask"""
        if self.mode == "backward":
            x, singular = self.backward.canonicalize(x_obs, self.pose, self.transforms)
            return x, ~singular
        x, singular = approx_inverse_lbs(self.transforms, self.skel, x_obs)
        return x, ~singular

    # Tape-side evaluation
    def transform_tensor(self) -> Tensor:
        return self.transforms_param if self.transforms_param is not None \
            else transform_stack(self.transforms)

    def sdf_tensor(self, x: Tensor, tape: Optional[Tape], tangent: bool = False) -> SdfOutput:
        cond = self.cond if self.cond_param is None else self.cond_param
        return self.sdf.evaluate(x, cond, self.latent, tape, tangent)

    def lbs_tensor(self, x: Tensor, tape: Optional[Tape]) -> Tensor:
        weights = self.skinning.evaluate(x, tape)[0]
        return forward_lbs_tensor(weights, self.transform_tensor(), x)

    def blend_weights(self, x_can: np.ndarray, x_obs: np.ndarray) -> np.ndarray:
        """The skinning weights that carry canonical points to the observed ones"""
        if self.mode == "backward":
            return self.backward.evaluate(Tensor(x_obs), self.pose).value
        if self.mode == "nearest":
            return nearest_body_weights(self.transforms, self.skel, x_obs)
        return self.skinning.weights(x_can)

    def canonical_tensor(self, x_star: np.ndarray, x_obs: np.ndarray, tape: Optional[Tape],
                         cond_cutoff: float = 1e8) -> Tuple[Tensor, np.ndarray]:
        """
        Differentiable canonical points for solved correspondences, with
        the mask of samples that keep their gradient
        """
        if self.mode == "forward":
            jacobian = self.lbs_with_jacobian(x_star)[1]
            return implicit_grad_correspondence(x_star, Tensor(x_obs), jacobian, self, tape,
                                                cond_cutoff)
        keep = np.ones(len(x_star), dtype=bool)
        if self.mode == "backward":
            return self.backward.canonicalize_tensor(Tensor(x_obs), self.pose,
                                                     self.transform_tensor(), tape), keep
        return Tensor(x_star), keep


######################################################################
#  B R O Y D E N   C O R E
######################################################################
def broyden_update(J: np.ndarray, dx: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Good Broyden: J' = J + ((dg - J dx) / |dx|^2) dx^T; skipped for |dx| < 1e-14"""
    J = np.asarray(J, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    dg = np.asarray(dg, dtype=np.float64)
    norm2 = float(dx @ dx)
    if norm2 < 1e-28:
        return J.copy()
    return J + np.outer((dg - J @ dx) / norm2, dx)


def broyden_update_batch(J: np.ndarray, dx: np.ndarray, dg: np.ndarray) -> np.ndarray:
    norm2 = np.sum(dx * dx, axis=-1)
    safe = np.where(norm2 < 1e-28, 1.0, norm2)
    secant = dg - np.einsum("nij,nj->ni", J, dx)
    update = np.einsum("ni,nj->nij", secant / safe[:, None], dx)
    return J + np.where((norm2 < 1e-28)[:, None, None], 0.0, update)


def _solve(J: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Batched J^-1 g; singular systems fall back to the pseudo-inverse"""
    out = np.zeros_like(g)
    det = np.abs(np.linalg.det(J))
    regular = np.isfinite(det) & (det > 1e-300)
    if np.any(regular):
        out[regular] = np.linalg.solve(J[regular], g[regular][..., None])[..., 0]
    if np.any(~regular):
        out[~regular] = np.einsum("nij,nj->ni", np.linalg.pinv(J[~regular]), g[~regular])
    return out


@dataclass
class _BroydenOutcome:
    u: np.ndarray
    g: np.ndarray
    done: np.ndarray
    iterations: np.ndarray
    history: np.ndarray


def _broyden(residual: Callable[[np.ndarray, np.ndarray], np.ndarray],
             jacobian: Callable[[np.ndarray, np.ndarray], np.ndarray],
             u0: np.ndarray, converged: Callable[[np.ndarray], np.ndarray],
             cfg: SolverConfig, active: Optional[np.ndarray] = None) -> _BroydenOutcome:
    """
    Damped quasi-Newton iteration on every row of ``u0``. Steps that do not
    reduce |g| are halved up to ``cfg.damping_halvings`` times before the
    row is abandoned.
    """
    count = len(u0)
    u = u0.copy()
    everything = np.arange(count)
    g = residual(u, everything)
    J = jacobian(u, everything)
    done = converged(g)
    failed = np.zeros(count, dtype=bool) if active is None else ~active
    iterations = np.zeros(count, dtype=int)
    history = np.full((count, cfg.max_iterations + 1), np.nan)
    history[:, 0] = np.linalg.norm(g, axis=1)
    for it in range(cfg.max_iterations):
        idx = np.nonzero(~done & ~failed)[0]
        if idx.size == 0:
            break
        step = -_solve(J[idx], g[idx])
        g_norm = np.linalg.norm(g[idx], axis=1)
        alpha = np.ones(len(idx))
        accepted = np.zeros(len(idx), dtype=bool)
        u_new = u[idx].copy()
        g_new = g[idx].copy()
        pending = np.arange(len(idx))
        for _ in range(cfg.damping_halvings + 1):
            trial = u[idx[pending]] + alpha[pending, None] * step[pending]
            g_trial = residual(trial, idx[pending])
            trial_norm = np.linalg.norm(g_trial, axis=1)
            ok = np.isfinite(trial_norm) & (trial_norm < g_norm[pending])
            took = pending[ok]
            u_new[took] = trial[ok]
            g_new[took] = g_trial[ok]
            accepted[took] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        failed[idx[~accepted]] = True
        rows = idx[accepted]
        if rows.size == 0:
            continue
        if cfg.exact_jacobian:
            J[rows] = jacobian(u_new[accepted], rows)
        else:
            J[rows] = broyden_update_batch(J[rows], u_new[accepted] - u[rows],
                                           g_new[accepted] - g[rows])
        u[rows] = u_new[accepted]
        g[rows] = g_new[accepted]
        iterations[rows] += 1
        history[rows, it + 1] = np.linalg.norm(g[rows], axis=1)
        done[rows] = converged(g[rows])
    return _BroydenOutcome(u, g, done, iterations, history)


######################################################################
#  C A N O N I C A L I Z A T I O N
######################################################################
def canonicalize_batch(x_obs: np.ndarray, scene: PosedScene, init: np.ndarray,
                       cfg: SolverConfig, tol: Optional[float] = None) -> RootBatch:
    """Solves LBS(x) = x_obs for every row, starting from ``init``"""
    tol = cfg.eps if tol is None else tol
    x_obs = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    counters().canonical_solves += len(x_obs)

    def residual(x, rows):
        return scene.lbs(x) - x_obs[rows]

    def jacobian(x, rows):
        return scene.lbs_with_jacobian(x)[1]

    def converged(g):
        return np.linalg.norm(g, axis=1) <= tol

    out = _broyden(residual, jacobian, np.atleast_2d(init).astype(np.float64), converged, cfg)
    norm = np.linalg.norm(out.g, axis=1)
    return RootBatch(out.u, np.zeros(len(x_obs)), out.done, out.iterations, norm, out.done, tol,
                     out.history)


def canonicalize(x_obs: np.ndarray, scene: PosedScene, init: Optional[np.ndarray],
                 cfg: SolverConfig) -> RootResult:
    """Canonical correspondence of one observed point (depth unused)"""
    x_obs = np.asarray(x_obs, dtype=np.float64).reshape(1, 3)
    start = scene.approx_inverse(x_obs) if init is None else np.reshape(init, (1, 3))
    return canonicalize_batch(x_obs, scene, start, cfg).result(0)


######################################################################
#  S P H E R E   T R A C I N G
######################################################################
def sphere_trace_batch(rays: RayBatch, scene: PosedScene,
                       cfg: SolverConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Marches every ray by the canonical SDF at approximately inverted points.
    Returns canonical guesses (N, 3), depths (N,) and the hit mask.
    """
    count = len(rays)
    d = rays.d_min.copy()
    x = np.zeros((count, 3))
    hit = np.zeros(count, dtype=bool)
    active = rays.valid.copy()
    for _ in range(cfg.max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        x_obs = rays.origins[idx] + rays.directions[idx] * d[idx, None]
        if scene.closed_form:
            x_can, ok = scene.canonical_closed_form(x_obs)
        else:
            x_can, ok = scene.approx_inverse(x_obs), np.ones(len(idx), dtype=bool)
        s = scene.sdf_values(x_can)
        x[idx] = x_can
        landed = ok & (s < cfg.hit_threshold)
        hit[idx[landed]] = True
        active[idx[landed]] = False
        moving = idx[~landed]
        d[moving] += np.where(ok[~landed], s[~landed], cfg.hit_threshold)
        active[moving[d[moving] > rays.d_max[moving]]] = False
    return x, d, hit


def sphere_trace_init(ray: Ray, scene: PosedScene,
                      cfg: SolverConfig) -> Optional[Tuple[np.ndarray, float]]:
    """(canonical guess, depth) for one ray, or None on a miss"""
    x, d, hit = sphere_trace_batch(RayBatch.from_rays([ray]), scene, cfg)
    return (x[0], float(d[0])) if hit[0] else None


######################################################################
#  J O I N T   R O O T   F I N D I N G
######################################################################
def joint_jacobian(scene: PosedScene, x: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """
    Exact 4x4 Jacobians of g at (x, d): first row [grad f, 0], then
    [d LBS / d x, -v]
    """
    _, grad = scene.sdf_values_and_grads(x)
    _, lbs_jac = scene.lbs_with_jacobian(x)
    J = np.zeros((len(x), 4, 4))
    J[:, 0, :3] = grad
    J[:, 1:, :3] = lbs_jac
    J[:, 1:, 3] = -directions
    return J


def joint_residual(scene: PosedScene, u: np.ndarray, origins: np.ndarray,
                   directions: np.ndarray) -> np.ndarray:
    x, d = u[:, :3], u[:, 3]
    g = np.empty((len(u), 4))
    g[:, 0] = scene.sdf_values(x)
    g[:, 1:] = scene.lbs(x) - (origins + directions * d[:, None])
    return g


def joint_root_find_batch(rays: RayBatch, scene: PosedScene, x0: np.ndarray, d0: np.ndarray,
                          cfg: SolverConfig, active: Optional[np.ndarray] = None) -> RootBatch:
    """Solves g(x, d) = 0 for every active ray, starting from (x0, d0)"""
    eps = cfg.eps
    u0 = np.concatenate([np.atleast_2d(x0), np.asarray(d0, dtype=np.float64)[:, None]], axis=1)

    def residual(u, rows):
        return joint_residual(scene, u, rays.origins[rows], rays.directions[rows])

    def jacobian(u, rows):
        return joint_jacobian(scene, u[:, :3], rays.directions[rows])

    def converged(g):
        return (np.abs(g[:, 0]) <= eps) & (np.linalg.norm(g[:, 1:], axis=1) <= eps)

    active = rays.valid if active is None else active & rays.valid
    counters().joint_solves += int(np.count_nonzero(active))
    out = _broyden(residual, jacobian, u0, converged, cfg, active)
    d = out.u[:, 3]
    in_bounds = (d >= rays.d_min) & (d <= rays.d_max)
    done = out.done & in_bounds & active
    residual_norm = np.maximum(np.abs(out.g[:, 0]), np.linalg.norm(out.g[:, 1:], axis=1))
    return RootBatch(out.u[:, :3], d, done, out.iterations, residual_norm, done, eps, out.history)


def joint_root_find(ray: Ray, scene: PosedScene, init: Tuple[np.ndarray, float],
                    cfg: SolverConfig) -> RootResult:
    x0, d0 = init
    return joint_root_find_batch(RayBatch.from_rays([ray]), scene, np.reshape(x0, (1, 3)),
                                 np.array([d0]), cfg).result(0)


def _closest_of(candidates: List[RootBatch]) -> RootBatch:
    """Per ray, the converged candidate with the smallest depth"""
    best = candidates[0]
    for other in candidates[1:]:
        better = other.hit & (~best.hit | (other.d < best.d))
        if np.any(better):
            index = np.nonzero(better)[0]
            best.assign(index, RootBatch(other.x[index], other.d[index], other.converged[index],
                                         other.iterations[index], other.residual[index],
                                         other.hit[index]))
    return best


def find_surface_batch(rays: RayBatch, scene: PosedScene, cfg: SolverConfig) -> RootBatch:
    """
    Sphere-trace initialization followed by the joint solver (forward
    skinning) or a bracketing search on the closed-form canonicalization
    (backward and nearest skinning). With ``cfg.n_inits == 3`` the two
    nearest bones' rigid inverses are tried as extra starting points.
    """
    if scene.closed_form:
        return secant_surface_find_batch(rays, scene, cfg)
    x0, d0, hit = sphere_trace_batch(rays, scene, cfg)
    out = RootBatch.empty(len(rays), cfg.eps)
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return out
    sub = rays.subset(idx)
    candidates = [joint_root_find_batch(sub, scene, x0[idx], d0[idx], cfg)]
    if cfg.n_inits > 1:
        x_obs = sub.at(d0[idx])
        for x_alt in rigid_inverse_inits(scene.transforms, scene.skel, x_obs, cfg.n_inits - 1):
            candidates.append(joint_root_find_batch(sub, scene, x_alt, d0[idx], cfg))
    out.assign(idx, _closest_of(candidates))
    return out


######################################################################
#  B A S E L I N E S
######################################################################
def naive_alternation_batch(rays: RayBatch, scene: PosedScene, cfg: SolverConfig) -> RootBatch:
    """
    Sphere tracing where every step canonicalizes exactly, followed by
    Newton steps along the ray, each again behind a full canonicalization.
    A refinement step counts itself plus its canonicalization's iterations.
    """
    count = len(rays)
    d = rays.d_min.copy()
    x = np.zeros((count, 3))
    hit = np.zeros(count, dtype=bool)
    active = rays.valid.copy()
    for _ in range(cfg.max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        x_obs = rays.origins[idx] + rays.directions[idx] * d[idx, None]
        solved = canonicalize_batch(x_obs, scene, scene.approx_inverse(x_obs), cfg)
        s = scene.sdf_values(solved.x)
        x[idx] = solved.x
        landed = s < cfg.hit_threshold
        hit[idx[landed]] = True
        active[idx[landed]] = False
        moving = idx[~landed]
        d[moving] += s[~landed]
        active[moving[d[moving] > rays.d_max[moving]]] = False

    out = RootBatch.empty(count, cfg.eps)
    idx = np.nonzero(hit)[0]
    iterations = np.zeros(count, dtype=int)
    residual = np.full(count, np.inf)
    converged = np.zeros(count, dtype=bool)
    pending = idx.copy()
    for _ in range(cfg.max_iterations):
        if pending.size == 0:
            break
        x_obs = rays.origins[pending] + rays.directions[pending] * d[pending, None]
        solved = canonicalize_batch(x_obs, scene, x[pending], cfg)
        x[pending] = solved.x
        iterations[pending] += solved.iterations
        s, grad = scene.sdf_values_and_grads(solved.x)
        _, lbs_jac = scene.lbs_with_jacobian(solved.x)
        residual[pending] = np.maximum(np.abs(s), solved.residual)
        ok = solved.converged & (np.abs(s) <= cfg.eps)
        converged[pending[ok]] = True
        pending = pending[~ok]
        s, grad, lbs_jac = s[~ok], grad[~ok], lbs_jac[~ok]
        if pending.size == 0:
            break
        # d s / d d = grad f . J^-1 v
        slope = np.einsum("ni,ni->n", grad, _solve(lbs_jac, rays.directions[pending]))
        usable = np.abs(slope) > 1e-12
        d[pending[usable]] -= s[usable] / slope[usable]
        iterations[pending] += 1
        pending = pending[usable]
    in_bounds = (d >= rays.d_min) & (d <= rays.d_max)
    converged &= in_bounds
    out.x[:] = x
    out.d[:] = d
    out.converged[:] = converged
    out.hit[:] = converged
    out.iterations[:] = iterations
    out.residual[:] = residual
    return out


def naive_alternation(ray: Ray, scene: PosedScene, cfg: SolverConfig) -> RootResult:
    return naive_alternation_batch(RayBatch.from_rays([ray]), scene, cfg).result(0)


def _canonical_sdf(scene: PosedScene, x_obs: np.ndarray, warm: Optional[np.ndarray],
                   cfg: SolverConfig) -> Tuple[np.ndarray, ...]:
    """Canonical points, SDF values, validity, correspondence residuals and iterations"""
    if scene.closed_form:
        x, ok = scene.canonical_closed_form(x_obs)
        zeros = np.zeros(len(x_obs))
        return x, scene.sdf_values(x), ok, zeros, zeros.astype(int)
    start = scene.approx_inverse(x_obs) if warm is None else warm
    solved = canonicalize_batch(x_obs, scene, start, cfg)
    return (solved.x, scene.sdf_values(solved.x), solved.converged, solved.residual,
            solved.iterations)


def secant_surface_find_batch(rays: RayBatch, scene: PosedScene, cfg: SolverConfig) -> RootBatch:
    """
    Marches until the canonical SDF changes sign, then runs false-position
    updates on the depth, each behind a fresh canonicalization. Rays with
    no sign change are misses. A refinement step counts itself plus its
    canonicalization's iterations.
    """
    count = len(rays)
    d = rays.d_min.copy()
    x = np.zeros((count, 3))
    lo = np.full(count, np.nan)
    s_lo = np.full(count, np.nan)
    hi = np.full(count, np.nan)
    s_hi = np.full(count, np.nan)
    bracketed = np.zeros(count, dtype=bool)
    active = rays.valid.copy()
    for _ in range(cfg.max_steps + 1):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        x_obs = rays.origins[idx] + rays.directions[idx] * d[idx, None]
        x_can, s_new, ok, _, _ = _canonical_sdf(scene, x_obs, None, cfg)
        x[idx] = x_can
        negative = ok & (s_new < 0)
        # a ray starting inside has no bracket and counts as a miss
        crossed = negative & np.isfinite(s_lo[idx])
        rows = idx[crossed]
        bracketed[rows] = True
        hi[rows] = d[rows]
        s_hi[rows] = s_new[crossed]
        active[idx[negative]] = False
        moving = idx[~negative]
        positive = ok[~negative]
        lo[moving[positive]] = d[moving[positive]]
        s_lo[moving[positive]] = s_new[~negative][positive]
        d[moving] += np.where(positive, np.maximum(s_new[~negative], cfg.hit_threshold),
                              cfg.hit_threshold)
        active[moving[d[moving] > rays.d_max[moving]]] = False

    out = RootBatch.empty(count, cfg.eps)
    iterations = np.zeros(count, dtype=int)
    converged = np.zeros(count, dtype=bool)
    residual = np.full(count, np.inf)
    depth = d.copy()
    pending = np.nonzero(bracketed)[0]
    for _ in range(cfg.max_iterations):
        if pending.size == 0:
            break
        denom = s_hi[pending] - s_lo[pending]
        guess = lo[pending] - s_lo[pending] * (hi[pending] - lo[pending]) / denom
        x_obs = rays.origins[pending] + rays.directions[pending] * guess[:, None]
        x_can, s_new, ok, corr, inner = _canonical_sdf(scene, x_obs, x[pending], cfg)
        iterations[pending] += 1 + inner
        depth[pending] = guess
        x[pending] = x_can
        residual[pending] = np.maximum(np.abs(s_new), corr)
        done = ok & (np.abs(s_new) <= cfg.eps) & (corr <= cfg.eps)
        converged[pending[done]] = True
        keep = ~done & ok
        rows = pending[keep]
        below = s_new[keep] < 0
        hi[rows[below]] = guess[keep][below]
        s_hi[rows[below]] = s_new[keep][below]
        lo[rows[~below]] = guess[keep][~below]
        s_lo[rows[~below]] = s_new[keep][~below]
        pending = rows
    in_bounds = (depth >= rays.d_min) & (depth <= rays.d_max)
    converged &= in_bounds
    out.x[:] = x
    out.d[:] = depth
    out.converged[:] = converged
    out.hit[:] = converged
    out.iterations[:] = iterations
    out.residual[:] = residual
    return out


def secant_surface_find(ray: Ray, scene: PosedScene, cfg: SolverConfig) -> RootResult:
    return secant_surface_find_batch(RayBatch.from_rays([ray]), scene, cfg).result(0)


######################################################################
#  I M P L I C I T   G R A D I E N T S
######################################################################
def _inverse_or_drop(J: np.ndarray, cutoff: float) -> Tuple[np.ndarray, np.ndarray]:
    """Inverses of well-conditioned matrices (zeros elsewhere) and the keep mask"""
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(J)
    keep = np.isfinite(cond) & (cond <= cutoff)
    inverse = np.zeros_like(J)
    if np.any(keep):
        inverse[keep] = np.linalg.inv(J[keep])
    if np.any(~keep):
        logger.warning("Dropping %d samples with ill-conditioned Jacobians", int((~keep).sum()))
    return inverse, keep


def implicit_grad_correspondence(x_star: np.ndarray, x_obs, J_star: np.ndarray,
                                 scene: PosedScene, tape: Optional[Tape],
                                 cond_cutoff: float = 1e8) -> Tuple[Tensor, np.ndarray]:
    """
    x = x* - J*^-1 (LBS(x*) - x_obs) with x* and J* held constant. The value
    equals x* at a converged root while gradients reach the skinning
    network, the bone transforms and x_obs. Returns the keep mask too.
    """
    x_star = np.atleast_2d(x_star)
    inverse, keep = _inverse_or_drop(np.reshape(J_star, (-1, 3, 3)), cond_cutoff)
    residual = scene.lbs_tensor(Tensor(x_star), tape) - ad.as_tensor(x_obs)
    return Tensor(x_star) - ad.matvec(Tensor(inverse), residual), keep


def implicit_grad_joint(x_star: np.ndarray, d_star: np.ndarray, J_star: np.ndarray,
                        rays: RayBatch, scene: PosedScene, tape: Optional[Tape],
                        cond_cutoff: float = 1e8) -> Tuple[Tensor, Tensor, np.ndarray]:
    """
    [x; d] = [x*; d*] - J*^-1 g(x*, d*), differentiable w.r.t. the SDF and
    skinning parameters. Returns (x, d, keep mask).
    """
    x_star = np.atleast_2d(x_star)
    d_star = np.asarray(d_star, dtype=np.float64).reshape(-1)
    inverse, keep = _inverse_or_drop(np.reshape(J_star, (-1, 4, 4)), cond_cutoff)
    x_const = Tensor(x_star)
    f = ad.reshape(scene.sdf_tensor(x_const, tape).s, (-1, 1))
    target = Tensor(rays.origins + rays.directions * d_star[:, None])
    g = ad.concat([f, scene.lbs_tensor(x_const, tape) - target], axis=-1)
    correction = ad.matvec(Tensor(inverse), g)
    return x_const - correction[:, :3], Tensor(d_star) - correction[:, 3], keep
