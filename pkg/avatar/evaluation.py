'''
Evaluation

Mesh extraction and cleanup, Chamfer distance and normal consistency
between surfaces, image PSNR and silhouette IoU, and the brute-force
oracle renderer that produces ground truth for the synthetic datasets.
'''

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple
import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree
from skimage import measure
from avatar.autodiff import Tensor
from avatar.fields import AnalyticColor, CanonicalSdf, normals_observation
from avatar.geom import Camera, Image, RayBatch, camera_ray_batch
from avatar.skeleton import (AnalyticSkinning, Pose, Skeleton, observation_bounds,
                             pose_to_transforms)
from avatar.solver import PosedScene, SolverConfig, canonicalize_batch
from avatar.avatar_exception import EmptySurface, InvalidArgument, ShapeMismatch

logger = logging.getLogger("avatar")

MIN_RESOLUTION = 8
DEGENERATE_AREA = 1e-12
CHAMFER_SCALE = 1e4
ORACLE_STEP = 1e-3
ORACLE_TOLERANCE = 1e-8
BISECTION_ITERATIONS = 20


######################################################################
#  M E S H E S
######################################################################
@dataclass
class TriMesh:
    """Indexed triangle mesh with optional per-vertex normals"""
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise InvalidArgument("2 VALIDATION: triangle index out of range for %d vertices"
                                  % len(self.vertices))
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise ShapeMismatch("2 VALIDATION: %d normals for %d vertices"
                                    % (len(self.normals), len(self.vertices)))

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized cross products (T, 3); length is twice the area"""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def centroid(self) -> np.ndarray:
        return self.vertices[np.unique(self.triangles)].mean(axis=0)

    def submesh(self, keep: np.ndarray) -> "TriMesh":
        """Triangles selected by ``keep`` with unreferenced vertices dropped"""
        triangles = self.triangles[keep]
        used, inverse = np.unique(triangles, return_inverse=True)
        normals = None if self.normals is None else self.normals[used]
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), normals)

    def cleanup(self, min_area: float = DEGENERATE_AREA) -> "TriMesh":
        if self.is_empty:
            return TriMesh.empty()
        return self.submesh(self.face_areas() > min_area)


def sample_grid(sdf: CanonicalSdf, lo: np.ndarray, hi: np.ndarray, resolution: int,
                cond=None, latent=None, chunk: int = 65536) -> np.ndarray:
    """SDF values on a resolution^3 lattice spanning [lo, hi] (indexing 'ij')"""
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.concatenate([sdf.values(points[start:start + chunk], cond, latent)
                             for start in range(0, len(points), chunk)])
    return values.reshape(resolution, resolution, resolution)


def marching_cubes(sdf: CanonicalSdf, cond=None, latent=None, resolution: int = 128,
                   bounds: Tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> TriMesh:
    """Zero level set of the SDF on a regular grid; empty if the grid has no sign change"""
    if resolution < MIN_RESOLUTION:
        raise InvalidArgument("2 VALIDATION: marching cubes needs resolution >= %d, got %d"
                              % (MIN_RESOLUTION, resolution))
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if not np.all(hi > lo):
        raise InvalidArgument("2 VALIDATION: empty mesh bounds %s .. %s" % (lo, hi))
    volume = sample_grid(sdf, lo, hi, resolution, cond, latent)
    if volume.min() > 0.0 or volume.max() < 0.0:
        logger.info("No zero crossing on the %d^3 grid", resolution)
        return TriMesh.empty()
    cell = (hi - lo) / (resolution - 1)
    vertices, faces, _, _ = measure.marching_cubes(volume, level=0.0, spacing=tuple(cell),
                                                   gradient_direction="ascent")
    vertices = vertices.astype(np.float64) + lo
    _, grads = sdf.values_and_gradients(vertices, cond, latent)
    lengths = np.linalg.norm(grads, axis=1, keepdims=True)
    normals = grads / np.where(lengths > 0, lengths, 1.0)
    mesh = TriMesh(vertices, faces, normals).cleanup()
    logger.debug("Marching cubes at %d^3: %d vertices, %d triangles", resolution,
                 len(mesh.vertices), len(mesh.triangles))
    return mesh


def connected_components(mesh: TriMesh) -> Tuple[int, np.ndarray]:
    """Component count and the component label of every triangle (vertex adjacency)"""
    if mesh.is_empty:
        return 0, np.zeros(0, dtype=np.int64)
    t = mesh.triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    count = len(mesh.vertices)
    graph = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(count, count))
    _, labels = csgraph.connected_components(graph, directed=False)
    used, triangle_labels = np.unique(labels[t[:, 0]], return_inverse=True)
    return len(used), triangle_labels


def largest_connected_component(mesh: TriMesh) -> TriMesh:
    """The component with the most triangles"""
    count, labels = connected_components(mesh)
    if count <= 1:
        return mesh
    best = np.argmax(np.bincount(labels))
    logger.debug("Keeping component %d of %d", best, count)
    return mesh.submesh(labels == best)


######################################################################
#  G E O M E T R Y   M E T R I C S
######################################################################
@dataclass(frozen=True)
class GeoMetrics:
    chamfer_l2: float
    normal_consistency: float
    samples: int = 0

    def __post_init__(self):
        if not self.chamfer_l2 >= 0:
            raise InvalidArgument("2 VALIDATION: chamfer distance must be >= 0")

    def serialize_to_dict(self) -> dict:
        return {
            "chamfer_l2": self.chamfer_l2,
            "chamfer_l2_x1e4": self.chamfer_l2 * CHAMFER_SCALE,
            "normal_consistency": self.normal_consistency,
            "samples": self.samples,
        }


def sample_mesh_surface(mesh: TriMesh, count: int,
                        rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Area-uniform points and their unit face normals"""
    if mesh.is_empty:
        raise EmptySurface("3 NUMERICAL: cannot sample an empty mesh")
    cross = mesh.face_normals()
    area = np.linalg.norm(cross, axis=1)
    faces = rng.choice(len(area), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(size=count))[:, None]
    r2 = rng.uniform(size=count)[:, None]
    v = mesh.vertices[mesh.triangles[faces]]
    points = (1.0 - r1) * v[:, 0] + r1 * (1.0 - r2) * v[:, 1] + r1 * r2 * v[:, 2]
    return points, cross[faces] / area[faces, None]


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Half the sum of the two mean squared nearest-neighbour distances"""
    if len(a) == 0 or len(b) == 0:
        raise EmptySurface("3 NUMERICAL: chamfer distance of an empty point set")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab ** 2)) + float(np.mean(d_ba ** 2)))


def normal_consistency_points(a: np.ndarray, na: np.ndarray, b: np.ndarray,
                              nb: np.ndarray) -> float:
    """Symmetric mean |cos| between each normal and its nearest neighbour's"""
    if len(a) == 0 or len(b) == 0:
        raise EmptySurface("3 NUMERICAL: normal consistency of an empty point set")
    _, ab = cKDTree(b).query(a)
    _, ba = cKDTree(a).query(b)
    cos_ab = np.abs(np.sum(na * nb[ab], axis=1))
    cos_ba = np.abs(np.sum(nb * na[ba], axis=1))
    return 0.5 * (float(cos_ab.mean()) + float(cos_ba.mean()))


def chamfer(a: TriMesh, b: TriMesh, samples: int = 100000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    return chamfer_points(sample_mesh_surface(a, samples, rng)[0],
                          sample_mesh_surface(b, samples, rng)[0])


def normal_consistency(a: TriMesh, b: TriMesh, samples: int = 100000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    pa, na = sample_mesh_surface(a, samples, rng)
    pb, nb = sample_mesh_surface(b, samples, rng)
    return normal_consistency_points(pa, na, pb, nb)


def geometry_metrics(a: TriMesh, b: TriMesh, samples: int = 100000, seed: int = 0) -> GeoMetrics:
    """Both metrics from one shared set of samples"""
    rng = np.random.default_rng(seed)
    pa, na = sample_mesh_surface(a, samples, rng)
    pb, nb = sample_mesh_surface(b, samples, rng)
    return GeoMetrics(chamfer_points(pa, pb), normal_consistency_points(pa, na, pb, nb), samples)


######################################################################
#  I M A G E   M E T R I C S
######################################################################
def _rgb(image) -> np.ndarray:
    return image.rgb if isinstance(image, Image) else np.asarray(image, dtype=np.float64)


def psnr(a, b, mask: Optional[np.ndarray] = None) -> float:
    """10 log10(1 / MSE) over (masked) pixels; infinite for identical images"""
    x, y = _rgb(a), _rgb(b)
    if x.shape != y.shape:
        raise ShapeMismatch("2 VALIDATION: cannot compare images of shape %s and %s"
                            % (x.shape, y.shape))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:mask.ndim]:
            raise ShapeMismatch("2 VALIDATION: mask shape %s does not match image %s"
                                % (mask.shape, x.shape))
        if not np.any(mask):
            raise InvalidArgument("2 VALIDATION: PSNR mask selects no pixels")
        x, y = x[mask], y[mask]
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def silhouette_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatch("2 VALIDATION: silhouettes of shape %s and %s" % (a.shape, b.shape))
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


######################################################################
#  O R A C L E   R E N D E R E R
######################################################################
@dataclass
class OracleScene:
    """Analytic body posed exactly by analytic skinning"""
    skel: Skeleton
    pose: Pose
    body: CanonicalSdf
    color: AnalyticColor

    def __post_init__(self):
        self.transforms = pose_to_transforms(self.skel, self.pose)
        self.posed = PosedScene(self.skel, self.body, AnalyticSkinning(self.skel),
                                self.transforms)
        self.solver = SolverConfig(max_iterations=100)

    def canonical_sdf(self, x_obs: np.ndarray,
                      warm: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Canonical points and SDF values; failed solves fall back to the approximate inverse"""
        approx = self.posed.approx_inverse(x_obs)
        start = approx if warm is None else warm
        solved = canonicalize_batch(x_obs, self.posed, start, self.solver, ORACLE_TOLERANCE)
        x = np.where(solved.converged[:, None], solved.x, approx)
        return x, self.body.values(x)


def oracle_trace(rays: RayBatch, scene: OracleScene, step: float = ORACLE_STEP,
                 bisection: int = BISECTION_ITERATIONS
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Marches every ray by max(step, s/2) until the canonical SDF turns
    non-positive, then bisects the last interval. Returns depths, canonical
    points and the hit mask.
    """
    if not step > 0:
        raise InvalidArgument("2 VALIDATION: oracle step must be positive, got %s" % step)
    count = len(rays)
    d = rays.d_min.copy()
    prev = d.copy()
    x = np.zeros((count, 3))
    hit = np.zeros(count, dtype=bool)
    active = rays.valid & np.isfinite(rays.d_max)
    warm = np.full((count, 3), np.nan)
    while np.any(active):
        idx = np.nonzero(active)[0]
        x_obs = rays.origins[idx] + rays.directions[idx] * d[idx, None]
        start = warm[idx]
        x_can, s = scene.canonical_sdf(x_obs, None if np.isnan(start).any() else start)
        warm[idx] = x_can
        x[idx] = x_can
        inside = s <= 0.0
        hit[idx[inside]] = True
        active[idx[inside]] = False
        moving = idx[~inside]
        prev[moving] = d[moving]
        d[moving] += np.maximum(step, 0.5 * s[~inside])
        active[moving[d[moving] > rays.d_max[moving]]] = False

    rows = np.nonzero(hit & (d > prev))[0]
    lo, hi = prev[rows].copy(), d[rows].copy()
    for _ in range(bisection):
        if rows.size == 0:
            break
        mid = 0.5 * (lo + hi)
        x_can, s = scene.canonical_sdf(rays.origins[rows] + rays.directions[rows] * mid[:, None],
                                       x[rows])
        below = s <= 0.0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
        x[rows[below]] = x_can[below]
    if rows.size:
        d[rows] = hi
    return d, x, hit


def oracle_shade(rays: RayBatch, depths: np.ndarray, x_can: np.ndarray, hit: np.ndarray,
                 scene: OracleScene) -> np.ndarray:
    """Analytic color at the hit points; black background"""
    rgb = np.zeros((len(rays), 3))
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return rgb
    _, grads = scene.body.values_and_gradients(x_can[idx])
    weights = scene.posed.skinning.weights(x_can[idx])
    normals, _ = normals_observation(weights, scene.transforms, Tensor(grads))
    rgb[idx] = scene.color.evaluate(Tensor(x_can[idx]), normals,
                                    Tensor(rays.directions[idx])).value
    return np.clip(rgb, 0.0, 1.0)


def oracle_render(cam: Camera, scene: OracleScene, step: float = ORACLE_STEP,
                  margin: float = 0.25, threads: int = 1, chunk_size: int = 4096) -> Image:
    """Ground-truth image and exact hit mask of the posed analytic body"""
    lo, hi = observation_bounds(scene.skel, scene.transforms, margin)
    rays = camera_ray_batch(cam, lo, hi)

    def work(start: int) -> Tuple[np.ndarray, np.ndarray]:
        chunk = rays.subset(slice(start, start + chunk_size))
        depths, x_can, hit = oracle_trace(chunk, scene, step)
        return oracle_shade(chunk, depths, x_can, hit, scene), hit

    starts = list(range(0, len(rays), chunk_size))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(start) for start in starts]
    rgb = np.concatenate([p[0] for p in parts])
    hit = np.concatenate([p[1] for p in parts])
    logger.debug("Oracle image %dx%d: %d hits", cam.width, cam.height, int(hit.sum()))
    return Image.from_flat(cam, rgb, hit)
