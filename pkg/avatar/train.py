'''
Training

The model bundle (fields, density and mask scales, per-frame latents),
ray batching and view augmentation, one optimization step, the supervised
pre-fits that stand in for a learned initialization, pose refinement by
implicit gradients, and the checkpointed training loop.
'''

import time
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple
import numpy as np
from scipy.spatial.transform import Rotation
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.adam import AdamState, Optimizer, ParamGroup, adam_step
from avatar.evaluation import psnr
from avatar.fields import AnalyticSdf, CanonicalSdf, ColorField, bind_latent
from avatar.formats import Dataset, Frame, JsonLinesWriter, View, load_checkpoint, save_checkpoint
from avatar.geom import Camera, Image, RayBatch, camera_ray_batch, normalize
from avatar.losses import (LossWeights, MaskParams, loss_color, loss_eikonal, loss_inside,
                           loss_mask, loss_offsurface, loss_skinning, min_sdf_along_rays,
                           sample_box, sample_inside, sample_offsurface, sample_surface,
                           total_loss)
from avatar.mlp import collect_gradients
from avatar.render import DensityParams, RenderConfig, Shading, render_image, render_rays
from avatar.skeleton import (AnalyticSkinning, BackwardSkinning, Pose, Skeleton, SkinningField,
                             observation_bounds, pose_to_transforms, transforms_tensor)
from avatar.solver import PosedScene, SolverConfig
from avatar.avatar_exception import InvalidArgument, NonFiniteValue, NumericalFailure

logger = logging.getLogger("avatar")

MAX_AUGMENT_ROUNDS = 16


######################################################################
#  C O N F I G U R A T I O N
######################################################################
@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    fg_rays: int = 1024
    bg_rays: int = 1024
    reg_samples: int = 1024
    pose_noise: float = 0.1
    view_augment_deg: float = 45.0
    lr: float = 1e-4
    sdf_lr: float = 1e-5
    latent_lr: float = 1e-3
    weight_decay: float = 0.0
    latent_weight_decay: float = 0.05
    prefit_steps: int = 0
    prefit_lr: float = 1e-4
    checkpoint_every: int = 100
    log_every: int = 10
    max_skipped: int = 10
    refine_steps: int = 50
    refine_lr: float = 1e-2
    refine_patience: int = 10
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        counts = (self.fg_rays, self.bg_rays, self.reg_samples)
        if self.steps < 0 or min(counts) < 1:
            raise InvalidArgument("2 VALIDATION: ray and sample counts must be positive")
        if self.pose_noise < 0 or self.view_augment_deg < 0:
            raise InvalidArgument("2 VALIDATION: noise standard deviations must be >= 0")
        if min(self.lr, self.sdf_lr, self.latent_lr, self.prefit_lr, self.refine_lr) < 0:
            raise InvalidArgument("2 VALIDATION: learning rates must be >= 0")
        if self.weight_decay < 0 or self.latent_weight_decay < 0:
            raise InvalidArgument("2 VALIDATION: weight decays must be >= 0")
        if min(self.checkpoint_every, self.log_every, self.max_skipped,
               self.refine_patience) < 1 or self.prefit_steps < 0 or self.refine_steps < 0:
            raise InvalidArgument("2 VALIDATION: intervals and patience must be positive")

    def serialize_to_dict(self) -> dict:
        return asdict(self)


######################################################################
#  M O D E L   B U N D L E
######################################################################
@dataclass
class FieldBundle:
    """
    Every learned piece of one subject. ``body`` is the analytic canonical
    body the regularizers and pre-fits are measured against.
    """
    skel: Skeleton
    body: AnalyticSdf
    sdf: CanonicalSdf
    skinning: SkinningField
    color: ColorField
    density: DensityParams
    mask: MaskParams
    latents: np.ndarray
    skinning_mode: str = "forward"
    backward: Optional[BackwardSkinning] = None
    pose_conditioning: bool = True

    @property
    def n_frames(self) -> int:
        return self.latents.shape[0]

    @property
    def last_frame(self) -> int:
        return max(self.n_frames - 1, 0)

    def sdf_arrays(self) -> Dict[str, np.ndarray]:
        return self.sdf.named_arrays()

    def field_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        arrays.update(self.skinning.named_arrays())
        arrays.update(self.color.named_arrays())
        if self.backward is not None:
            arrays.update(self.backward.named_arrays())
        arrays.update(self.density.named_arrays())
        arrays.update(self.mask.named_arrays())
        return arrays

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = dict(self.sdf_arrays())
        arrays.update(self.field_arrays())
        if self.latents.size:
            arrays["latents"] = self.latents
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copies saved values into the live arrays; unknown keys are an error"""
        mine = self.named_arrays()
        for key, array in arrays.items():
            if key.startswith("adam."):
                continue
            if key not in mine:
                raise InvalidArgument("2 VALIDATION: checkpoint array %s does not fit this model"
                                      % key)
            if mine[key].shape != array.shape:
                raise InvalidArgument("2 VALIDATION: checkpoint array %s has shape %s, expected %s"
                                      % (key, array.shape, mine[key].shape))
            mine[key][...] = array

    def parameter_groups(self, cfg: TrainConfig) -> List[ParamGroup]:
        groups = [
            ParamGroup("sdf", self.sdf_arrays(), AdamState(lr=cfg.sdf_lr)),
            ParamGroup("fields", self.field_arrays(),
                       AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)),
        ]
        if self.latents.size:
            groups.append(ParamGroup("latents", {"latents": self.latents},
                                     AdamState(lr=cfg.latent_lr,
                                               weight_decay=cfg.latent_weight_decay)))
        return [group for group in groups if group.params]

    def conditioning(self, pose: Pose, rng: Optional[np.random.Generator] = None,
                     noise: float = 0.0) -> Optional[np.ndarray]:
        """Pose vector for the SDF; noise touches the joint rotations only"""
        if not self.pose_conditioning:
            return None
        cond = pose.conditioning()
        if rng is not None and noise > 0:
            count = pose.rotations.size
            cond[:count] += rng.normal(0.0, noise, size=count)
        return cond

    def latent(self, frame: int, tape: Optional[Tape] = None):
        if not self.latents.size:
            return None
        return bind_latent(self.latents, min(frame, self.last_frame), tape)

    def scene(self, pose: Pose, frame: int, tape: Optional[Tape] = None,
              cond: Optional[np.ndarray] = None) -> PosedScene:
        return PosedScene(self.skel, self.sdf, self.skinning, pose_to_transforms(self.skel, pose),
                          self.conditioning(pose) if cond is None else cond,
                          self.latent(frame, tape), self.skinning_mode, self.backward, pose)

    def shading(self, view_augment=None) -> Shading:
        return Shading(self.color, self.density, view_augment)


######################################################################
#  R A Y   B A T C H E S
######################################################################
@dataclass
class RayBatchSample:
    """Training rays of one frame with their target colors and occupancy"""
    frame: int
    rays: RayBatch
    rgb: np.ndarray
    occupancy: np.ndarray


def view_rays(view: View, bounds: Tuple[np.ndarray, np.ndarray]) -> RayBatch:
    return camera_ray_batch(view.camera, bounds[0], bounds[1])


def training_views(dataset: Dataset, frame_index: int) -> List[View]:
    """
    Views of one frame that training may see: the held-out view is left
    out unless it is the only view in the dataset
    """
    views = dataset.frames[frame_index].views
    held_frame, held = held_out_view(dataset)
    if frame_index != held_frame or sum(len(f.views) for f in dataset.frames) <= 1:
        return list(views)
    return [view for view in views if view is not held]


def sample_training_rays(dataset: Dataset, frame_index: int, bundle: FieldBundle,
                         cfg: TrainConfig, rng: np.random.Generator,
                         margin: float = 0.25) -> RayBatchSample:
    """
    Pools the pixels of the training views of one frame and draws up to
    ``fg_rays`` foreground and ``bg_rays`` background rays without replacement
    """
    frame = dataset.frames[frame_index]
    views = training_views(dataset, frame_index)
    if not views:
        raise InvalidArgument("2 VALIDATION: frame %d has no training views" % frame_index)
    bounds = observation_bounds(bundle.skel, pose_to_transforms(bundle.skel, frame.pose), margin)
    batches = [view_rays(view, bounds) for view in views]
    origins = np.concatenate([b.origins for b in batches])
    directions = np.concatenate([b.directions for b in batches])
    d_min = np.concatenate([b.d_min for b in batches])
    d_max = np.concatenate([b.d_max for b in batches])
    valid = np.concatenate([b.valid for b in batches])
    rgb = np.concatenate([view.image.flat_rgb() for view in views])
    mask = np.concatenate([view.image.flat_mask() for view in views])
    fg = np.nonzero(mask)[0]
    bg = np.nonzero(~mask)[0]
    pick = np.concatenate([rng.choice(fg, size=min(cfg.fg_rays, len(fg)), replace=False),
                           rng.choice(bg, size=min(cfg.bg_rays, len(bg)), replace=False)])
    rays = RayBatch(origins[pick], directions[pick], d_min[pick], d_max[pick], valid[pick])
    return RayBatchSample(frame_index, rays, rgb[pick], mask[pick].astype(np.float64))


def augment_views(view: np.ndarray, normals: np.ndarray, rng: np.random.Generator,
                  std_deg: float = 45.0, max_rounds: int = MAX_AUGMENT_ROUNDS) -> np.ndarray:
    """
    Rotates each view direction by a random axis-angle with normally
    distributed components; draws whose angle with the negated normal is
    above 90 degrees are redrawn. Rows that never pass keep the input
    direction if it passes, otherwise they look straight along -n.
    """
    view = np.asarray(view, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    out = view.copy()
    if std_deg <= 0 or len(view) == 0:
        return out
    std = np.deg2rad(std_deg)
    pending = np.arange(len(view))
    for _ in range(max_rounds):
        if pending.size == 0:
            break
        rotated = Rotation.from_rotvec(rng.normal(0.0, std, size=(len(pending), 3))) \
            .apply(view[pending])
        ok = np.sum(rotated * -normals[pending], axis=1) >= 0.0
        out[pending[ok]] = rotated[ok]
        pending = pending[~ok]
    if pending.size:
        facing = np.sum(view[pending] * -normals[pending], axis=1) >= 0.0
        out[pending[~facing]] = -normals[pending[~facing]]
    return normalize(out)


######################################################################
#  O N E   S T E P
######################################################################
def _surface_mode(render_cfg: RenderConfig) -> bool:
    return render_cfg.mode == "surface"


def compute_losses(batch: RayBatchSample, pose: Pose, bundle: FieldBundle, cfg: TrainConfig,
                   render_cfg: RenderConfig, solver_cfg: SolverConfig,
                   rng: np.random.Generator,
                   tape: Optional[Tape]) -> Tuple[Dict[str, Tensor], dict]:
    """Every loss term with a positive weight, plus render statistics"""
    weights = cfg.weights
    cond = bundle.conditioning(pose, rng, cfg.pose_noise)
    scene = bundle.scene(pose, batch.frame, tape, cond)
    augment = None
    if cfg.view_augment_deg > 0:
        def augment(view, normals):
            return augment_views(view, normals, rng, cfg.view_augment_deg)
    out = render_rays(batch.rays, scene, bundle.shading(augment), render_cfg, solver_cfg,
                      rng, tape)
    parts: Dict[str, Tensor] = {}
    if weights.color > 0:
        parts["color"] = loss_color(out.rgb, batch.rgb)
    latent = scene.latent
    if weights.eikonal > 0:
        parts["eikonal"] = loss_eikonal(bundle.sdf, sample_box(rng, cfg.reg_samples), cond,
                                        latent, tape)
    if weights.offsurface > 0:
        parts["offsurface"] = loss_offsurface(
            bundle.sdf, sample_offsurface(bundle.body, rng, cfg.reg_samples), cond, latent, tape)
    if weights.inside > 0:
        parts["inside"] = loss_inside(bundle.sdf, sample_inside(bundle.body, rng, cfg.reg_samples),
                                      cond, latent, tape)
    if weights.skinning > 0 and bundle.skinning.named_arrays():
        points = sample_surface(bundle.body, rng, cfg.reg_samples)
        target = AnalyticSkinning(bundle.skel).weights(points)
        parts["skinning"] = loss_skinning(bundle.skinning, points, target, tape)
    if weights.mask > 0 and _surface_mode(render_cfg):
        min_sdf, found = min_sdf_along_rays(batch.rays, scene, solver_cfg, rng, tape)
        outside = (~out.hit | (batch.occupancy == 0)) & found
        parts["mask"] = loss_mask(min_sdf, batch.occupancy, bundle.mask.tensor(tape),
                                  len(batch.rays), outside)
    stats = {"hit_fraction": float(out.hit.mean()) if len(out.hit) else 0.0,
             "rays": len(batch.rays)}
    return parts, stats


def train_step(dataset: Dataset, bundle: FieldBundle, optimizer: Optimizer, cfg: TrainConfig,
               render_cfg: RenderConfig, solver_cfg: SolverConfig,
               rng: np.random.Generator) -> dict:
    """
    Samples one frame's rays, renders them, and takes one Adam step on the
    weighted loss. A non-finite loss skips the update.
    """
    started = time.perf_counter()
    frames = [index for index in range(len(dataset.frames)) if training_views(dataset, index)]
    frame_index = frames[int(rng.integers(len(frames)))]
    batch = sample_training_rays(dataset, frame_index, bundle, cfg, rng, render_cfg.margin)
    tape = Tape()
    parts, stats = compute_losses(batch, dataset.frames[frame_index].pose, bundle, cfg,
                                  render_cfg, solver_cfg, rng, tape)
    metrics = {"frame": frame_index, "b": bundle.density.b, "alpha": bundle.mask.alpha}
    metrics.update(stats)
    metrics.update({name: float(np.reshape(part.value, ())) for name, part in parts.items()})
    try:
        loss = total_loss(parts, cfg.weights, _surface_mode(render_cfg))
    except NonFiniteValue as error:
        logger.warning("Skipping step: %s", error)
        optimizer.skipped += 1
        metrics.update({"loss": None, "skipped": True,
                        "seconds": time.perf_counter() - started})
        return metrics
    metrics["loss"] = float(np.reshape(loss.value, ()))
    stepped = False
    if loss.tape is tape:
        tape.backward(loss)
        stepped = optimizer.step(collect_gradients(tape, bundle.named_arrays()))
    metrics["skipped"] = not stepped
    metrics["seconds"] = time.perf_counter() - started
    return metrics


######################################################################
#  P R E - F I T S
######################################################################
def _prefit_points(body: AnalyticSdf, rng: np.random.Generator, count: int) -> np.ndarray:
    half = count // 2
    near = sample_surface(body, rng, count - half) + rng.normal(0.0, 0.05, size=(count - half, 3))
    return np.concatenate([sample_box(rng, half), near])


def prefit_sdf(bundle: FieldBundle, steps: int, lr: float, rng: np.random.Generator,
               samples: int = 1024, eikonal_weight: float = 0.1) -> List[float]:
    """Regresses the neural SDF to the analytic body at the rest pose (L1 plus Eikonal)"""
    arrays = bundle.sdf_arrays()
    if not arrays or steps <= 0:
        return []
    state = AdamState(lr=lr)
    cond = bundle.conditioning(Pose.rest(len(bundle.skel)))
    history = []
    for step in range(steps):
        points = _prefit_points(bundle.body, rng, samples)
        target = bundle.body.values(points)
        tape = Tape()
        out = bundle.sdf.evaluate(Tensor(points), cond, None, tape, tangent=True)
        loss = ad.mean(ad.tabs(out.s - Tensor(target))) + eikonal_weight * ad.mean(
            ad.tabs(ad.norm(out.tangent, axis=0, eps=1e-30) - 1.0))
        tape.backward(loss)
        adam_step(arrays, collect_gradients(tape, arrays), state)
        history.append(float(loss.value))
        if step % 50 == 0:
            logger.debug("SDF pre-fit step %d: %.6f", step, history[-1])
    logger.info("SDF pre-fit: %.6f -> %.6f over %d steps", history[0], history[-1], steps)
    return history


def prefit_skinning(bundle: FieldBundle, steps: int, lr: float, rng: np.random.Generator,
                    samples: int = 1024) -> List[float]:
    """Regresses the neural skinning field to the analytic weights"""
    arrays = bundle.skinning.named_arrays()
    if not arrays or steps <= 0:
        return []
    state = AdamState(lr=lr)
    reference = AnalyticSkinning(bundle.skel)
    history = []
    for _ in range(steps):
        points = _prefit_points(bundle.body, rng, samples)
        tape = Tape()
        loss = loss_skinning(bundle.skinning, points, reference.weights(points), tape)
        tape.backward(loss)
        adam_step(arrays, collect_gradients(tape, arrays), state)
        history.append(float(loss.value))
    logger.info("Skinning pre-fit: %.6f -> %.6f over %d steps", history[0], history[-1], steps)
    return history


######################################################################
#  P O S E   R E F I N E M E N T
######################################################################
@dataclass
class RefineResult:
    pose: Pose
    losses: List[float]
    best_loss: float
    reverted: bool = False


def _frame_rays(frame: Frame, bundle: FieldBundle, pose: Pose,
                margin: float) -> Tuple[RayBatch, np.ndarray]:
    bounds = observation_bounds(bundle.skel, pose_to_transforms(bundle.skel, pose), margin)
    batches = [view_rays(view, bounds) for view in frame.views]
    rays = RayBatch(np.concatenate([b.origins for b in batches]),
                    np.concatenate([b.directions for b in batches]),
                    np.concatenate([b.d_min for b in batches]),
                    np.concatenate([b.d_max for b in batches]),
                    np.concatenate([b.valid for b in batches]))
    return rays, np.concatenate([view.image.flat_rgb() for view in frame.views])


def pose_loss(bundle: FieldBundle, frame: Frame, frame_index: int, rotations: np.ndarray,
              pose: Pose, render_cfg: RenderConfig, solver_cfg: SolverConfig,
              tape: Optional[Tape], rays: Optional[RayBatch] = None,
              target: Optional[np.ndarray] = None) -> Tensor:
    """
    Photometric loss of ``frame`` as a function of the joint rotations.
    The fields are frozen; gradients reach the rotations through the bone
    transforms and the SDF conditioning.
    """
    current = pose.with_rotations(rotations)
    if rays is None:
        rays, target = _frame_rays(frame, bundle, current, render_cfg.margin)
    rot = tape.watch(rotations, "pose.rotations") if tape is not None else Tensor(rotations)
    global_rotvec = Rotation.from_matrix(pose.global_transform.rotation).as_rotvec()
    scene = bundle.scene(current, frame_index)
    scene.transforms_param = transforms_tensor(bundle.skel, rot, Tensor(global_rotvec),
                                               Tensor(pose.global_transform.translation),
                                               pose.scales)
    if bundle.pose_conditioning:
        scene.cond_param = ad.concat([ad.reshape(rot, (-1,)), Tensor(pose.scales)], axis=0)
    cfg = RenderConfig(**{**asdict(render_cfg), "stratified": False})
    out = render_rays(rays, scene, bundle.shading(), cfg, solver_cfg)
    return loss_color(out.rgb, target)


def refine_pose(bundle: FieldBundle, frame: Frame, frame_index: int, initial: Pose,
                cfg: TrainConfig, render_cfg: RenderConfig, solver_cfg: SolverConfig,
                pixels: Optional[int] = None,
                rng: Optional[np.random.Generator] = None) -> RefineResult:
    """
    Adam on the joint rotations of one frame. The root joint stays fixed.
    When the loss has not improved for ``refine_patience`` steps the best
    rotations seen so far are restored.
    """
    if bundle.skinning_mode == "nearest":
        logger.warning("Pose refinement has no gradient path in nearest skinning mode")
    rotations = initial.rotations.copy()
    rays, target = _frame_rays(frame, bundle, initial, render_cfg.margin)
    if pixels is not None and pixels < len(rays):
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(rays), size=pixels, replace=False))
        rays, target = rays.subset(pick), target[pick]
    state = AdamState(lr=cfg.refine_lr)
    best = rotations.copy()
    best_loss = np.inf
    stale = 0
    losses = []
    reverted = False
    for step in range(cfg.refine_steps):
        tape = Tape()
        loss = pose_loss(bundle, frame, frame_index, rotations, initial, render_cfg, solver_cfg,
                         tape, rays, target)
        value = float(np.reshape(loss.value, ()))
        losses.append(value)
        if value < best_loss:
            best_loss, best, stale = value, rotations.copy(), 0
        else:
            stale += 1
            if stale >= cfg.refine_patience:
                logger.info("Pose refinement stalled at step %d; restoring the best pose", step)
                reverted = True
                break
        if loss.tape is not tape:
            break
        tape.backward(loss)
        grad = tape.grad_of(rotations).copy()
        grad[0] = 0.0
        if not adam_step({"rotations": rotations}, {"rotations": grad}, state):
            break
    logger.info("Pose refinement: %.6f -> %.6f", losses[0] if losses else np.nan, best_loss)
    return RefineResult(initial.with_rotations(best), losses, float(best_loss), reverted)


######################################################################
#  E V A L U A T I O N
######################################################################
def held_out_view(dataset: Dataset) -> Tuple[int, View]:
    """The last camera of the last frame"""
    frame = dataset.frames[-1]
    return len(dataset.frames) - 1, frame.views[-1]


def render_view(bundle: FieldBundle, pose: Pose, frame_index: int, camera: Camera,
                render_cfg: RenderConfig, solver_cfg: SolverConfig, seed: int = 0,
                threads: int = 1) -> Image:
    scene = bundle.scene(pose, frame_index)
    cfg = RenderConfig(**{**asdict(render_cfg), "stratified": False})
    return render_image(camera, scene, bundle.shading(), cfg, solver_cfg, seed, threads)


def evaluate_view(bundle: FieldBundle, dataset: Dataset, render_cfg: RenderConfig,
                  solver_cfg: SolverConfig, threads: int = 1) -> Tuple[float, Image]:
    frame_index, view = held_out_view(dataset)
    image = render_view(bundle, dataset.frames[frame_index].pose, frame_index, view.camera,
                        render_cfg, solver_cfg, threads=threads)
    return psnr(image, view.image), image


######################################################################
#  T R A I N I N G   L O O P
######################################################################
class Trainer:
    """
    Owns the optimizer and RNG of one run. ``state`` and ``restore`` carry
    everything needed to continue a run exactly where a checkpoint left it.
    """

    def __init__(self, dataset: Dataset, bundle: FieldBundle, cfg: TrainConfig,
                 render_cfg: RenderConfig, solver_cfg: SolverConfig, seed: int = 0,
                 header: Optional[dict] = None):
        self.dataset = dataset
        self.bundle = bundle
        self.cfg = cfg
        self.render_cfg = render_cfg
        self.solver_cfg = solver_cfg
        self.rng = np.random.default_rng(seed)
        self.optimizer = Optimizer(bundle.parameter_groups(cfg))
        self.step = 0
        self.streak = 0
        self.header = dict(header or {})

    def state(self) -> Tuple[dict, Dict[str, np.ndarray]]:
        header = dict(self.header)
        header.update({
            "step": self.step,
            "skipped": self.optimizer.skipped,
            "optimizer": self.optimizer.state_header(),
            "rng": self.rng.bit_generator.state,
        })
        arrays = dict(self.bundle.named_arrays())
        arrays.update(self.optimizer.state_arrays())
        return header, arrays

    def save(self, path: str) -> None:
        header, arrays = self.state()
        save_checkpoint(path, header, arrays)

    def restore(self, header: dict, arrays: Dict[str, np.ndarray]) -> None:
        self.bundle.load_arrays(arrays)
        self.optimizer.load_state(header.get("optimizer", {}), arrays)
        self.optimizer.skipped = int(header.get("skipped", 0))
        self.step = int(header.get("step", 0))
        if "rng" in header:
            self.rng.bit_generator.state = header["rng"]

    def resume(self, path: str) -> None:
        self.restore(*load_checkpoint(path))
        logger.info("Resumed from %s at step %d", path, self.step)

    def prefit(self) -> None:
        if self.cfg.prefit_steps:
            prefit_sdf(self.bundle, self.cfg.prefit_steps, self.cfg.prefit_lr, self.rng)
            prefit_skinning(self.bundle, self.cfg.prefit_steps, self.cfg.prefit_lr, self.rng)

    def run_step(self) -> dict:
        metrics = train_step(self.dataset, self.bundle, self.optimizer, self.cfg,
                             self.render_cfg, self.solver_cfg, self.rng)
        self.step += 1
        metrics["step"] = self.step
        if metrics["loss"] is None:
            self.streak += 1
            if self.streak >= self.cfg.max_skipped:
                raise NumericalFailure("3 NUMERICAL: %d consecutive non-finite losses at step %d"
                                       % (self.streak, self.step))
        else:
            self.streak = 0
        return metrics

    def run(self, steps: Optional[int] = None, log: Optional[JsonLinesWriter] = None,
            checkpoint_path: Optional[str] = None) -> List[dict]:
        steps = self.cfg.steps if steps is None else steps
        history = []
        started = time.perf_counter()
        while self.step < steps:
            metrics = self.run_step()
            metrics["wall_clock"] = time.perf_counter() - started
            history.append(metrics)
            if log is not None:
                log.write(metrics)
            if self.step % self.cfg.log_every == 0 or self.step == steps:
                logger.info("step %d loss %s b %.4f", self.step, metrics["loss"], metrics["b"])
            if checkpoint_path and (self.step % self.cfg.checkpoint_every == 0
                                    or self.step == steps):
                self.save(checkpoint_path)
        return history
