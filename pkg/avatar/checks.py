'''
Self-checks

Property suites run by ``avatar check``. Each suite draws its own seeded
cases, returns a pass flag with the worst value it measured, and never
raises for a failed property; the report lists every suite exactly once.
'''

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional
import numpy as np
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.evaluation import OracleScene, oracle_trace
from avatar.fields import AnalyticColor, AnalyticSdf
from avatar.geom import Camera
from avatar.losses import loss_eikonal
from avatar.mlp import Activation, build_mlp, mlp_forward
from avatar.render import composite, scene_rays, sdf_to_density
from avatar.skeleton import (AnalyticSkinning, NeuralSkinning, capsule_chain, forward_lbs,
                             pose_to_transforms, random_pose)
from avatar.solver import (PosedScene, SolverConfig, canonicalize_batch, find_surface_batch,
                           implicit_grad_correspondence)
from avatar.avatar_exception import AvatarException

logger = logging.getLogger("avatar")

GRAD_TOLERANCE = 1e-5
DENSITY_TOLERANCE = 1e-12
QUADRATURE_TOLERANCE = 1e-12
DEPTH_TOLERANCE = 1e-3
IMPLICIT_TOLERANCE = 1e-3

DensityFunction = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int = 0
    worst: float = 0.0
    detail: Dict = field(default_factory=dict)

    def serialize_to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "cases": self.cases,
                "worst": self.worst, "detail": self.detail}


######################################################################
#  S U I T E S
######################################################################
def check_gradients(rng: np.random.Generator) -> SuiteResult:
    """Tape gradients of the primitives against central differences"""
    b = rng.normal(size=(3, 3))
    w = rng.normal(size=(4, 3))
    mask = rng.uniform(size=(4, 3)) > 0.5
    functions = {
        "exp": lambda x: ad.tsum(ad.exp(x)),
        "log": lambda x: ad.tsum(ad.log(ad.square(x) + 1.0)),
        "sin_cos": lambda x: ad.tsum(ad.sin(x) * ad.cos(x)),
        "sqrt": lambda x: ad.tsum(ad.sqrt(ad.square(x) + 0.5)),
        "sigmoid": lambda x: ad.tsum(ad.sigmoid(x) * Tensor(w)),
        "softplus": lambda x: ad.tsum(ad.softplus(x, beta=3.0)),
        "matmul": lambda x: ad.tsum(ad.square(x @ Tensor(b))),
        "inverse": lambda x: ad.tsum(ad.inverse(x[:3] + Tensor(3.0 * np.eye(3)))),
        "softmax": lambda x: ad.tsum(ad.softmax(x, axis=-1) * Tensor(w)),
        "norm": lambda x: ad.tsum(ad.norm(x, axis=-1)),
        "cumsum": lambda x: ad.tsum(ad.cumsum(x, axis=1) * Tensor(w)),
        "where": lambda x: ad.tsum(ad.where(mask, ad.square(x), x * 2.0)),
        "concat_stack": lambda x: ad.tsum(ad.stack([x, ad.concat([x[:, 1:], x[:, :1]], axis=1)])
                                          * Tensor(np.stack([w, w]))),
        "getitem": lambda x: ad.tsum(ad.square(x[np.array([0, 2, 2])])),
    }
    errors = {}
    for name, f in functions.items():
        x = rng.normal(size=(4, 3))
        errors[name] = ad.grad_check(f, x, h=1e-6)
    params = build_mlp([3, 8, 8, 1], Activation("softplus", beta=10.0), rng)
    errors["mlp_input"] = ad.grad_check(lambda x: ad.tsum(mlp_forward(params, x)),
                                        rng.normal(size=(5, 3)), h=1e-6)
    worst = max(errors.values())
    return SuiteResult("gradcheck", worst < GRAD_TOLERANCE, len(errors), worst,
                       {"errors": errors})


def check_simplex(rng: np.random.Generator) -> SuiteResult:
    """Skinning weights are non-negative and sum to one"""
    skel = capsule_chain(4)
    points = rng.uniform(-1.5, 1.5, size=(512, 3))
    worst = 0.0
    negative = False
    for skinning in (AnalyticSkinning(skel), NeuralSkinning.create(len(skel), rng, 16, 2)):
        weights = skinning.weights(points)
        worst = max(worst, float(np.abs(weights.sum(axis=1) - 1.0).max()))
        negative |= bool((weights < 0).any())
    return SuiteResult("simplex", worst < 1e-9 and not negative, 2 * len(points), worst)


def check_eikonal(rng: np.random.Generator) -> SuiteResult:
    """An exact sphere SDF has unit gradient norm"""
    points = rng.uniform(-1.0, 1.0, size=(1024, 3))
    points = points[np.linalg.norm(points, axis=1) > 1e-3]
    value = float(loss_eikonal(AnalyticSdf.sphere(radius=0.5), points).value)
    return SuiteResult("eikonal", value < 1e-9, len(points), value)


def check_transmittance(rng: np.random.Generator, cases: int = 10000) -> SuiteResult:
    """Transmittance never increases; weights lie in [0, 1] and sum to at most one"""
    sigma = rng.exponential(5.0, size=(cases, 16))
    deltas = rng.uniform(0.0, 0.1, size=(cases, 16))
    _, weights = composite(Tensor(sigma), deltas, Tensor(np.zeros((cases, 16, 3))))
    w = weights.value
    transmittance = np.exp(-np.concatenate([np.zeros((cases, 1)),
                                            np.cumsum(sigma * deltas, axis=1)], axis=1))
    increasing = bool((np.diff(transmittance, axis=1) > 1e-15).any())
    total = w.sum(axis=1)
    worst = float(max(0.0, -w.min(), w.max() - 1.0, total.max() - 1.0))
    return SuiteResult("transmittance", not increasing and worst <= 1e-12, cases, worst)


def check_density(rng: np.random.Generator, density: DensityFunction = sdf_to_density,
                  cases: int = 10000) -> SuiteResult:
    """sigma(0-) = sigma(0+) = 1/(2b), sigma decreases in s and stays in (0, 1/b]"""
    b = rng.uniform(0.01, 1.0, size=cases)
    gaps = []
    bad_order = 0
    bad_range = 0
    for scale in b:
        left = float(density(-1e-300, scale))
        right = float(density(1e-300, scale))
        half = 0.5 / scale
        gaps.append(max(abs(left - half), abs(right - half)) * scale)
        s = np.sort(rng.normal(0.0, 3.0 * scale, size=8))
        values = np.asarray(density(s, scale))
        bad_order += int((np.diff(values) > 1e-15 / scale).any())
        bad_range += int((values <= 0).any() or (values > 1.0 / scale * (1 + 1e-12)).any())
    worst = float(max(gaps))
    passed = worst <= DENSITY_TOLERANCE and bad_order == 0 and bad_range == 0
    return SuiteResult("density", passed, cases, worst,
                       {"not_decreasing": bad_order, "out_of_range": bad_range})


def check_quadrature(rng: np.random.Generator, cases: int = 10000) -> SuiteResult:
    """Vectorized compositing against a sample-by-sample loop"""
    samples = 8
    sigma = rng.exponential(3.0, size=(cases, samples))
    deltas = rng.uniform(0.0, 0.2, size=(cases, samples))
    colors = rng.uniform(size=(cases, samples, 3))
    rgb, _ = composite(Tensor(sigma), deltas, Tensor(colors))
    expected = np.zeros((cases, 3))
    for n in range(cases):
        transmittance = 1.0
        for i in range(samples):
            alpha = 1.0 - np.exp(-sigma[n, i] * deltas[n, i])
            expected[n] += transmittance * alpha * colors[n, i]
            transmittance *= np.exp(-sigma[n, i] * deltas[n, i])
    worst = float(np.abs(rgb.value - expected).max())
    return SuiteResult("quadrature", worst <= QUADRATURE_TOLERANCE, cases, worst)


def _chain_scene(rng: np.random.Generator, max_angle: float = 0.4):
    skel = capsule_chain(3)
    body = AnalyticSdf.from_skeleton(skel)
    pose = random_pose(skel, rng, max_angle)
    scene = PosedScene(skel, body, AnalyticSkinning(skel), pose_to_transforms(skel, pose))
    return skel, body, pose, scene


def check_root_finding(rng: np.random.Generator, poses: int = 3,
                       resolution: int = 16) -> SuiteResult:
    """Joint root finding against the dense-march oracle on a posed capsule chain"""
    cfg = SolverConfig()
    mutual = agree = 0
    worst_residual = 0.0
    for _ in range(poses):
        skel, body, pose, scene = _chain_scene(rng)
        oracle = OracleScene(skel, pose, body, AnalyticColor.palette(skel))
        cam = Camera.look_at((0.0, 0.4, 2.5), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 50.0,
                             resolution, resolution)
        rays = scene_rays(cam, scene, 0.25)
        roots = find_surface_batch(rays, scene, cfg)
        depths, _, hit = oracle_trace(rays, oracle)
        both = roots.hit & hit
        mutual += int(both.sum())
        agree += int((np.abs(roots.d[both] - depths[both]) <= DEPTH_TOLERANCE).sum())
        if roots.hit.any():
            worst_residual = max(worst_residual, float(roots.residual[roots.hit].max()))
    fraction = agree / mutual if mutual else 0.0
    passed = mutual > 0 and fraction >= 0.99 and worst_residual <= cfg.eps
    return SuiteResult("root_finding", passed, mutual, 1.0 - fraction,
                       {"agreement": fraction, "max_residual": worst_residual})


def check_implicit_gradients(rng: np.random.Generator, cases: int = 20,
                             h: float = 1e-5) -> SuiteResult:
    """d x*/d x_obs from the implicit formula against re-solved central differences"""
    cfg = SolverConfig(max_iterations=100)
    tol = 1e-12
    worst = 0.0
    done = 0
    for _ in range(cases):
        skel, body, _, scene = _chain_scene(rng)
        canonical = rng.uniform(-0.6, 0.6, size=(1, 3)) * np.array([1.0, 0.2, 0.2])
        weights = AnalyticSkinning(skel).weights(canonical)
        x_obs = forward_lbs(weights, scene.transforms, canonical)
        solved = canonicalize_batch(x_obs, scene, canonical, cfg, tol)
        if not solved.converged[0]:
            continue
        jacobian = scene.lbs_with_jacobian(solved.x)[1]
        direction = rng.normal(size=3)
        tape = Tape()
        leaf = tape.variable(x_obs.copy(), "x_obs")
        x, keep = implicit_grad_correspondence(solved.x, leaf, jacobian, scene, tape)
        if not keep[0]:
            continue
        tape.backward(ad.tsum(x * Tensor(direction)))
        analytic = leaf.grad[0]
        numeric = np.zeros(3)
        for i in range(3):
            step = np.zeros((1, 3))
            step[0, i] = h
            plus = canonicalize_batch(x_obs + step, scene, solved.x, cfg, tol).x[0]
            minus = canonicalize_batch(x_obs - step, scene, solved.x, cfg, tol).x[0]
            numeric[i] = direction @ (plus - minus) / (2 * h)
        error = float(np.abs(analytic - numeric).max() / max(1.0, np.abs(numeric).max()))
        worst = max(worst, error)
        done += 1
    return SuiteResult("implicit_gradients", done > 0 and worst < IMPLICIT_TOLERANCE, done, worst)


######################################################################
#  R E P O R T
######################################################################
SUITES = ("gradcheck", "simplex", "eikonal", "transmittance", "density", "quadrature",
          "root_finding", "implicit_gradients")


def run_checks(seed: int = 0, only: Optional[List[str]] = None,
               density: DensityFunction = sdf_to_density) -> dict:
    """Runs the suites (all of them unless ``only`` names some) and builds the report"""
    runners = {
        "gradcheck": check_gradients,
        "simplex": check_simplex,
        "eikonal": check_eikonal,
        "transmittance": check_transmittance,
        "density": lambda rng: check_density(rng, density),
        "quadrature": check_quadrature,
        "root_finding": check_root_finding,
        "implicit_gradients": check_implicit_gradients,
    }
    results = []
    for name in SUITES:
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, SUITES.index(name)])
        try:
            result = runners[name](rng)
        except (AvatarException, FloatingPointError, np.linalg.LinAlgError) as error:
            logger.error("Suite %s raised: %s", name, error)
            result = SuiteResult(name, False, detail={"error": str(error)})
        logger.info("%-20s %s (worst %.3g over %d cases)", name,
                    "pass" if result.passed else "FAIL", result.worst, result.cases)
        results.append(result)
    return {"passed": all(r.passed for r in results),
            "suites": [r.serialize_to_dict() for r in results]}
