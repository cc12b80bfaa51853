'''
Avatar command line

Commands:
---------
synth  - renders a multi-view dataset of the posed analytic body
train  - fits a model to a dataset, with checkpoints and a JSON-lines log
render - renders a checkpoint for a training or novel pose
mesh   - extracts the canonical mesh and compares it with the analytic body
bench  - compares joint root finding with the alternation and secant baselines
check  - runs the property suites

Every command prints a JSON summary on stdout and exits with one of the
codes in avatar.status.
'''

import os
import sys
import time
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Type
import click
import numpy as np
import config
from avatar import status
from avatar import autodiff as ad
from avatar.checks import SUITES, run_checks
from avatar.configuration import (Config, build_body, build_model, build_skeleton,
                                  build_truth_color, load_config)
from avatar.evaluation import (OracleScene, geometry_metrics, largest_connected_component,
                               marching_cubes, oracle_render, psnr, silhouette_iou)
from avatar.formats import (Dataset, Frame, JsonLinesWriter, View, dumps, load_checkpoint,
                            load_dataset, read_json, write_csv, write_dataset, write_image,
                            write_json, write_obj)
from avatar.geom import Camera, RayBatch, normalize, orbit_cameras, ray_box_bounds
from avatar.render import RENDER_MODES
from avatar.skeleton import (AnalyticSkinning, Pose, Skeleton, observation_bounds,
                             pose_to_transforms, pose_trajectory, random_pose)
from avatar.solver import (OperationCounters, PosedScene, RootBatch, SolverConfig, counters,
                           find_surface_batch, naive_alternation_batch,
                           secant_surface_find_batch)
from avatar.train import FieldBundle, Trainer, evaluate_view, render_view
from avatar.avatar_exception import (AvatarException, ConfigValidationError, DegenerateBlend,
                                     EmptySurface, InvalidArgument, MissingResource,
                                     NonFiniteValue, NotOnTape, NumericalFailure,
                                     ShapeMismatch, SingularTransform)

logger = logging.getLogger("avatar")

CHECKPOINT_NAME = "checkpoint.npz"
LOG_NAME = "train.jsonl"
METRICS_NAME = "metrics.json"
MESH_MARGIN = 0.1
AGREEMENT_TOLERANCE = 1e-4
BENCH_COLUMNS = ("strategy", "rays", "converged_fraction", "median_iterations",
                 "mean_solves_per_ray", "ns_per_ray", "agreement")
ABLATION_COLUMNS = ("variant", "steps", "final_loss", "psnr", "silhouette_iou")


######################################################################
#  E R R O R   H A N D L E R S
######################################################################
HANDLERS: Dict[Type[BaseException], Callable[[BaseException], int]] = {}


def errorhandler(exc_class: Type[BaseException]):
    """Registers the function that turns ``exc_class`` into an exit code"""
    def register(function: Callable[[BaseException], int]):
        HANDLERS[exc_class] = function
        return function
    return register


def handle_error(error: BaseException) -> Optional[int]:
    """Exit code from the handler of the closest registered class, None if unhandled"""
    for klass in type(error).__mro__:
        if klass in HANDLERS:
            return HANDLERS[klass](error)
    return None


@errorhandler(ConfigValidationError)
def config_validation_error(error):
    """ Handles config documents that break the schema """
    message = str(error)
    logger.error(message)
    return status.EXIT_2_VALIDATION


@errorhandler(InvalidArgument)
def invalid_argument_error(error):
    """ Handles bad values in arguments, files and manifests """
    message = str(error)
    logger.error(message)
    return status.EXIT_2_VALIDATION


@errorhandler(ShapeMismatch)
def shape_mismatch_error(error):
    """ Handles arrays and images of incompatible shapes """
    message = str(error)
    logger.error(message)
    return status.EXIT_2_VALIDATION


@errorhandler(MissingResource)
def missing_resource_error(error):
    """ Handles missing datasets, checkpoints and configs """
    message = str(error)
    logger.error(message)
    return status.EXIT_2_VALIDATION


@errorhandler(OSError)
def os_error(error):
    """ Handles files that cannot be read or written """
    message = "2 VALIDATION: %s" % error
    logger.error(message)
    return status.EXIT_2_VALIDATION


@errorhandler(NumericalFailure)
def numerical_failure_error(error):
    """ Handles aborted solves and training runs """
    message = str(error)
    logger.error(message)
    return status.EXIT_3_NUMERICAL


@errorhandler(NonFiniteValue)
def non_finite_value_error(error):
    """ Handles NaN or infinite values that reached an output """
    message = str(error)
    logger.error(message)
    return status.EXIT_3_NUMERICAL


@errorhandler(SingularTransform)
def singular_transform_error(error):
    """ Handles bone transforms that cannot be inverted """
    message = str(error)
    logger.error(message)
    return status.EXIT_3_NUMERICAL


@errorhandler(DegenerateBlend)
def degenerate_blend_error(error):
    """ Handles blended transforms that collapse """
    message = str(error)
    logger.error(message)
    return status.EXIT_3_NUMERICAL


@errorhandler(EmptySurface)
def empty_surface_error(error):
    """ Handles fields with no zero level set """
    message = str(error)
    logger.error(message)
    return status.EXIT_3_NUMERICAL


@errorhandler(NotOnTape)
def not_on_tape_error(error):
    """ Handles gradients requested for values that were never recorded """
    message = str(error)
    logger.error(message)
    return status.EXIT_3_NUMERICAL


@errorhandler(AvatarException)
def avatar_error(error):
    """ Handles any other avatar failure """
    message = str(error)
    logger.critical(message)
    return status.EXIT_3_NUMERICAL


class AvatarGroup(click.Group):
    """
    Command group that maps exceptions to the documented exit codes:
    click usage errors exit 1, everything else goes through HANDLERS.
    """

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True,
             **extra):
        try:
            result = super().main(args, prog_name, complete_var, False, **extra)
        except click.ClickException as error:
            error.show()
            code = status.EXIT_1_USAGE
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = status.EXIT_1_USAGE
        except Exception as error:  # pylint: disable=broad-except
            code = handle_error(error)
            if code is None:
                raise
        else:
            code = result if isinstance(result, int) else status.EXIT_0_OK
        if standalone_mode:
            sys.exit(code)
        return code


@dataclass
class RunContext:
    settings: Config
    threads: int = 1

    @property
    def seed(self) -> int:
        return self.settings.seed


pass_run = click.make_pass_decorator(RunContext)


######################################################################
#  H E L P E R S
######################################################################
def parse_size(ctx, param, value) -> Optional[Tuple[int, int]]:
    """Click callback for WxH sizes"""
    if value is None:
        return None
    try:
        width, height = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise click.BadParameter("expected WxH such as 128x128, got %s" % value)
    if width < 1 or height < 1:
        raise click.BadParameter("image size must be at least 1x1, got %s" % value)
    return width, height


def scene_center(skel: Skeleton) -> np.ndarray:
    lo, hi = skel.bounds()
    return 0.5 * (lo + hi)


def synth_cameras(settings: Config, skel: Skeleton, count: Optional[int] = None,
                  size: Optional[Tuple[int, int]] = None) -> List[Camera]:
    spec = settings.synth
    width, height = size or (spec.width, spec.height)
    return orbit_cameras(count or spec.cameras, spec.radius, spec.elevation, spec.fov, width,
                         height, scene_center(skel))


def resize_camera(cam: Camera, size: Tuple[int, int]) -> Camera:
    """Same view at another resolution"""
    sx, sy = size[0] / cam.width, size[1] / cam.height
    return Camera(cam.fx * sx, cam.fy * sy, cam.cx * sx, cam.cy * sy, size[0], size[1],
                  cam.extrinsic)


def load_model(path: str) -> Tuple[Config, FieldBundle, dict]:
    """Config, model and header of a training checkpoint"""
    header, arrays = load_checkpoint(path)
    try:
        settings = Config.from_dict(header["config"])
        skel = Skeleton.deserialize_from_dict(header["skeleton"])
        frames = int(header["frames"])
    except KeyError as error:
        raise InvalidArgument("2 VALIDATION: checkpoint %s has no %s entry"
                              % (path, error.args[0]))
    bundle = build_model(settings, skel, frames)
    bundle.load_arrays(arrays)
    logger.info("Loaded %s (step %s)", path, header.get("step", 0))
    return settings, bundle, header


def _frame_of(dataset: Dataset, frame: int) -> Frame:
    if not 0 <= frame < len(dataset.frames):
        raise InvalidArgument("2 VALIDATION: frame %d is outside the %d dataset frames"
                              % (frame, len(dataset.frames)))
    return dataset.frames[frame]


def _view_of(frame: Frame, camera: int) -> View:
    if not 0 <= camera < len(frame.views):
        raise InvalidArgument("2 VALIDATION: camera %d is outside the %d views of frame %d"
                              % (camera, len(frame.views), frame.index))
    return frame.views[camera]


def _read_pose(path: str, skel: Skeleton) -> Pose:
    pose = Pose.deserialize_from_dict(read_json(path))
    if len(pose) != len(skel):
        raise InvalidArgument("2 VALIDATION: pose %s has %d joints, the model has %d"
                              % (path, len(pose), len(skel)))
    return pose


######################################################################
#  C O M M A N D   B O D I E S
######################################################################
def cmd_synth(settings: Config, out_dir: str, n_frames: Optional[int] = None,
              n_cameras: Optional[int] = None, size: Optional[Tuple[int, int]] = None,
              png: bool = False, threads: int = 1) -> dict:
    """Pose trajectory rendered by the oracle from equally spaced cameras"""
    spec = settings.synth
    n_frames = n_frames or spec.frames
    skel = build_skeleton(settings.scene)
    body = build_body(settings.scene, skel)
    color = build_truth_color(settings.scene, skel)
    rng = np.random.default_rng(settings.seed)
    poses = pose_trajectory(skel, n_frames, rng, spec.amplitude)
    cameras = synth_cameras(settings, skel, n_cameras, size)
    frames = []
    for index, pose in enumerate(poses):
        scene = OracleScene(skel, pose, body, color)
        views = [View(cam, oracle_render(cam, scene, spec.oracle_step, settings.render.margin,
                                         threads), i)
                 for i, cam in enumerate(cameras)]
        frames.append(Frame(index, pose, views))
        logger.info("Frame %d of %d rendered", index + 1, n_frames)
    description = {"seed": settings.seed, "scene": asdict(settings.scene),
                   "cameras": len(cameras), "width": cameras[0].width,
                   "height": cameras[0].height}
    return write_dataset(out_dir, Dataset(frames, skel, description), png)


def cmd_train(settings: Config, data: str, out_dir: str, steps: Optional[int] = None,
              resume: bool = False, evaluate: bool = True, threads: int = 1) -> dict:
    """
    Trains on a dataset. The checkpoint holds the config, the skeleton and
    the last training pose so later commands need nothing else.
    """
    dataset = load_dataset(data)
    skel = dataset.skeleton
    bundle = build_model(settings, skel, len(dataset))
    header = {"config": settings.to_dict(), "skeleton": skel.serialize_to_dict(),
              "frames": len(dataset), "last_pose": dataset.frames[-1].pose.serialize_to_dict()}
    trainer = Trainer(dataset, bundle, settings.train, settings.render, settings.solver,
                      settings.seed, header)
    checkpoint = os.path.join(out_dir, CHECKPOINT_NAME)
    if resume:
        trainer.resume(checkpoint)
    else:
        trainer.prefit()
    with JsonLinesWriter(os.path.join(out_dir, LOG_NAME), append=resume) as log:
        history = trainer.run(steps, log, checkpoint)
    trainer.save(checkpoint)
    losses = [m["loss"] for m in history if m["loss"] is not None]
    metrics = {
        "step": trainer.step,
        "skipped": trainer.optimizer.skipped,
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "checkpoint": checkpoint,
    }
    if evaluate:
        value, image = evaluate_view(bundle, dataset, settings.render, settings.solver, threads)
        write_image(image, os.path.join(out_dir, "held_out.ppm"),
                    os.path.join(out_dir, "held_out.pgm"))
        metrics["held_out_psnr"] = value
        logger.info("Held-out PSNR %.2f dB", value)
    write_json(os.path.join(out_dir, METRICS_NAME), metrics)
    return metrics


def cmd_render(checkpoint: str, out: str, data: Optional[str] = None,
               pose_path: Optional[str] = None, frame: Optional[int] = None, camera: int = 0,
               size: Optional[Tuple[int, int]] = None, mode: Optional[str] = None,
               png: bool = False, seed: int = 0, threads: int = 1) -> dict:
    """
    Pose from --pose, else the dataset frame, else the last training pose.
    The camera comes from the dataset when one is given, else from the
    synthesis orbit. PSNR is reported when a dataset image shows the same
    pose from the same camera.
    """
    settings, bundle, header = load_model(checkpoint)
    render_cfg = settings.render if mode is None else replace(settings.render, mode=mode)
    frame_index = bundle.last_frame if frame is None else frame
    dataset = load_dataset(data) if data else None
    target = None
    if dataset is not None:
        view = _view_of(_frame_of(dataset, frame_index), camera)
        cam = view.camera
        target = view.image if pose_path is None and size is None else None
    else:
        cameras = synth_cameras(settings, bundle.skel)
        if not 0 <= camera < len(cameras):
            raise InvalidArgument("2 VALIDATION: camera %d is outside the %d orbit cameras"
                                  % (camera, len(cameras)))
        cam = cameras[camera]
    if size is not None:
        cam = resize_camera(cam, size)
    if pose_path:
        pose = _read_pose(pose_path, bundle.skel)
    elif dataset is not None:
        pose = dataset.frames[frame_index].pose
    else:
        pose = Pose.deserialize_from_dict(header["last_pose"])
    image = render_view(bundle, pose, frame_index, cam, render_cfg, settings.solver, seed,
                        threads)
    stem = os.path.splitext(out)[0]
    write_image(image, out, stem + ".pgm", png)
    result = {"image": out, "mask": stem + ".pgm", "mode": render_cfg.mode,
              "frame": frame_index, "foreground": int(image.mask.sum())}
    if target is not None:
        result["psnr"] = psnr(image, target)
        result["silhouette_iou"] = silhouette_iou(image.mask, target.mask)
        logger.info("PSNR %.2f dB against %s", result["psnr"], data)
    return result


def cmd_mesh(checkpoint: str, out: str, resolution: int = 128, samples: int = 100000,
             frame: Optional[int] = None, seed: int = 0) -> dict:
    """Canonical rest-pose mesh of the learned SDF and its metrics against the analytic body"""
    _, bundle, _ = load_model(checkpoint)
    frame_index = bundle.last_frame if frame is None else frame
    cond = bundle.conditioning(Pose.rest(len(bundle.skel)))
    latent = bundle.latent(frame_index)
    latent = None if latent is None else ad.value_of(latent)
    bounds = bundle.skel.bounds(MESH_MARGIN)
    mesh = largest_connected_component(marching_cubes(bundle.sdf, cond, latent, resolution,
                                                      bounds))
    if mesh.is_empty:
        raise EmptySurface("3 NUMERICAL: the learned SDF has no zero level set inside %s .. %s"
                           % (bounds[0], bounds[1]))
    reference = largest_connected_component(marching_cubes(bundle.body, None, None, resolution,
                                                           bounds))
    metrics = geometry_metrics(mesh, reference, samples, seed)
    write_obj(out, mesh.vertices, mesh.triangles, mesh.normals)
    result = dict(metrics.serialize_to_dict())
    result.update({"mesh": out, "resolution": resolution, "vertices": len(mesh.vertices),
                   "triangles": len(mesh.triangles)})
    write_json(os.path.splitext(out)[0] + ".json", result)
    return result


######################################################################
#  B E N C H M A R K
######################################################################
STRATEGIES: Dict[str, Callable[[RayBatch, PosedScene, SolverConfig], RootBatch]] = {
    "joint": find_surface_batch,
    "alternation": naive_alternation_batch,
    "secant": secant_surface_find_batch,
}


def bench_rays(lo: np.ndarray, hi: np.ndarray, count: int, radius: float,
               rng: np.random.Generator) -> RayBatch:
    """Rays from a sphere around the box aimed at random points inside it"""
    center = 0.5 * (lo + hi)
    origins = center + radius * normalize(rng.normal(size=(count, 3)))
    directions = normalize(rng.uniform(lo, hi, size=(count, 3)) - origins)
    d_min, d_max = ray_box_bounds(origins, directions, lo, hi)
    return RayBatch(origins, directions, d_min, d_max)


def bench_scenes(settings: Config, n_rays: int, n_poses: int) -> List[Tuple[PosedScene, RayBatch]]:
    """The same random poses and rays for every strategy"""
    skel = build_skeleton(settings.scene)
    body = build_body(settings.scene, skel)
    skinning = AnalyticSkinning(skel)
    rng = np.random.default_rng(settings.seed)
    per_pose = [n_rays // n_poses + (1 if i < n_rays % n_poses else 0) for i in range(n_poses)]
    scenes = []
    for count in per_pose:
        pose = random_pose(skel, rng, settings.synth.amplitude)
        transforms = pose_to_transforms(skel, pose)
        lo, hi = observation_bounds(skel, transforms, settings.render.margin)
        scenes.append((PosedScene(skel, body, skinning, transforms),
                       bench_rays(lo, hi, count, settings.synth.radius, rng)))
    return scenes


def _agreement(roots: RootBatch, reference: RootBatch) -> float:
    both = roots.converged & reference.converged
    if not np.any(both):
        return float("nan")
    close = (np.abs(roots.d[both] - reference.d[both]) <= AGREEMENT_TOLERANCE) & \
        (np.linalg.norm(roots.x[both] - reference.x[both], axis=1) <= AGREEMENT_TOLERANCE)
    return float(close.mean())


def cmd_bench(settings: Config, n_rays: int = 1000, strategies: Sequence[str] = tuple(STRATEGIES),
              n_poses: int = 5, max_steps: Optional[int] = None) -> List[dict]:
    """
    One row per strategy: converged fraction, median iterations of the
    converged rays, canonicalize-equivalent solves per ray, time per ray and
    agreement with the joint solver on mutually converged rays
    """
    unknown = [name for name in strategies if name not in STRATEGIES]
    if unknown:
        raise InvalidArgument("2 VALIDATION: unknown strategies %s" % ", ".join(unknown))
    solver_cfg = settings.solver if max_steps is None \
        else settings.solver.with_overrides(max_steps=max_steps)
    scenes = bench_scenes(settings, n_rays, n_poses)
    reference = [find_surface_batch(rays, scene, solver_cfg) for scene, rays in scenes]
    rows = []
    for name in strategies:
        solve = STRATEGIES[name]
        before = OperationCounters(**counters().as_dict())
        started = time.perf_counter_ns()
        results = [solve(rays, scene, solver_cfg) for scene, rays in scenes]
        elapsed = time.perf_counter_ns() - started
        used = counters().minus(before)
        converged = np.concatenate([r.converged for r in results])
        iterations = np.concatenate([r.iterations for r in results])
        agreement = [_agreement(r, ref) for r, ref in zip(results, reference)]
        agreement = [a for a in agreement if not np.isnan(a)]
        rows.append({
            "strategy": name,
            "rays": len(converged),
            "converged_fraction": float(converged.mean()) if len(converged) else 0.0,
            "median_iterations": float(np.median(iterations[converged]))
            if np.any(converged) else float("nan"),
            "mean_solves_per_ray": used.solves / max(len(converged), 1),
            "ns_per_ray": elapsed / max(len(converged), 1),
            "agreement": float(np.mean(agreement)) if agreement else float("nan"),
        })
        logger.info("%-12s converged %.3f, %.2f solves/ray, %.0f ns/ray", name,
                    rows[-1]["converged_fraction"], rows[-1]["mean_solves_per_ray"],
                    rows[-1]["ns_per_ray"])
    return rows


def ablation_variants(settings: Config) -> Dict[str, Config]:
    """Run configs of each sampling, initialization and skinning variant"""
    render, solver, fields = settings.render, settings.solver, settings.fields
    hybrid = replace(render, mode="volume", sampling="hybrid")
    return {
        "hybrid": replace(settings, render=hybrid),
        "uniform": replace(settings, render=replace(render, mode="volume", sampling="uniform")),
        "surface": replace(settings, render=replace(render, mode="surface")),
        "three_inits": replace(settings, render=hybrid, solver=solver.with_overrides(n_inits=3)),
        "backward_skinning": replace(settings, render=hybrid,
                                     fields=replace(fields, skinning_mode="backward")),
        "nearest_skinning": replace(settings, render=hybrid,
                                    fields=replace(fields, skinning_mode="nearest")),
    }


def cmd_ablate(settings: Config, data: str, steps: int = 100, threads: int = 1,
               variants: Optional[Sequence[str]] = None) -> List[dict]:
    """
    Trains a fresh model per variant on the same short schedule and reports
    its held-out PSNR and silhouette IoU.
    """
    dataset = load_dataset(data)
    target = dataset.frames[-1].views[-1].image
    configs = ablation_variants(settings)
    unknown = sorted(set(variants or ()) - set(configs))
    if unknown:
        raise InvalidArgument("2 VALIDATION: unknown ablation variants %s" % ", ".join(unknown))
    rows = []
    for name, variant in configs.items():
        if variants and name not in variants:
            continue
        bundle = build_model(variant, dataset.skeleton, len(dataset))
        trainer = Trainer(dataset, bundle, variant.train, variant.render, variant.solver,
                          variant.seed)
        trainer.prefit()
        losses = [m["loss"] for m in trainer.run(steps) if m["loss"] is not None]
        value, image = evaluate_view(bundle, dataset, variant.render, variant.solver, threads)
        rows.append({"variant": name, "steps": trainer.step,
                     "final_loss": losses[-1] if losses else None, "psnr": value,
                     "silhouette_iou": silhouette_iou(image.mask, target.mask)})
        logger.info("%-18s %.2f dB after %d steps", name, value, trainer.step)
    return rows


######################################################################
#  C O M M A N D S
######################################################################
@click.group(cls=AvatarGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Run config (JSON); defaults to $AVATAR_CONFIG when that file exists")
@click.option("--seed", type=int, default=None, help="Overrides the config seed")
@click.option("--threads", type=click.IntRange(min=1), default=config.AVATAR_THREADS,
              show_default=True, help="Worker threads for rendering")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"],
                                               case_sensitive=False),
              default=None, help="Overrides $LOGGING_LEVEL")
@click.pass_context
def cli(ctx, config_path, seed, threads, log_level):
    """Articulated signed-distance-field avatars"""
    if log_level:
        logger.setLevel(log_level.upper())
    if config_path is None and os.path.isfile(config.AVATAR_CONFIG):
        config_path = config.AVATAR_CONFIG
    settings = load_config(config_path)
    if seed is not None:
        settings = replace(settings, seed=seed)
    elif config_path is None:
        settings = replace(settings, seed=config.AVATAR_SEED)
    if config.AVATAR_DETERMINISTIC and threads > 1:
        logger.info("Deterministic mode: ignoring --threads %d", threads)
        threads = 1
    ctx.obj = RunContext(settings, threads)


@cli.command("synth")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--frames", type=click.IntRange(min=1), default=None,
              help="Frames of the pose trajectory [config synth.frames]")
@click.option("--cameras", type=click.IntRange(min=1), default=None,
              help="Equally spaced cameras [config synth.cameras]")
@click.option("--size", callback=parse_size, default=None, metavar="WxH",
              help="Image size [config synth.width x synth.height]")
@click.option("--png", is_flag=True, help="Also write PNG copies of the images")
@pass_run
def synth_command(run, out_dir, frames, cameras, size, png):
    """Render a synthetic multi-view dataset of the analytic body"""
    manifest = cmd_synth(run.settings, out_dir, frames, cameras, size, png, run.threads)
    click.echo(dumps({"dataset": out_dir, "frames": len(manifest["frames"]),
                      "views": sum(len(f["views"]) for f in manifest["frames"])}))


@cli.command("train")
@click.argument("data", type=click.Path())
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--steps", type=click.IntRange(min=0), default=None,
              help="Total optimizer steps [config train.steps]")
@click.option("--resume", is_flag=True, help="Continue from OUT_DIR/checkpoint.npz")
@click.option("--mode", type=click.Choice(RENDER_MODES), default=None,
              help="Rendering mode during training [config render.mode]")
@click.option("--no-eval", "skip_eval", is_flag=True, help="Skip the held-out evaluation")
@pass_run
def train_command(run, data, out_dir, steps, resume, mode, skip_eval):
    """Train a model on DATA (a dataset directory or manifest)"""
    settings = run.settings if mode is None else run.settings.with_section("render", mode=mode)
    metrics = cmd_train(settings, data, out_dir, steps, resume, not skip_eval, run.threads)
    click.echo(dumps(metrics))


@cli.command("render")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default="render.ppm", show_default=True,
              help="PPM output; the mask goes next to it as .pgm")
@click.option("--dataset", "data", type=click.Path(), default=None,
              help="Dataset supplying the camera, the pose and the reference image")
@click.option("--pose", "pose_path", type=click.Path(dir_okay=False), default=None,
              help="Pose JSON, for novel poses")
@click.option("--frame", type=click.IntRange(min=0), default=None,
              help="Frame whose latent code (and dataset pose) is used [last]")
@click.option("--camera", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--size", callback=parse_size, default=None, metavar="WxH")
@click.option("--mode", type=click.Choice(RENDER_MODES), default=None)
@click.option("--png", is_flag=True, help="Also write a PNG copy")
@pass_run
def render_command(run, checkpoint, out, data, pose_path, frame, camera, size, mode, png):
    """Render a trained model"""
    result = cmd_render(checkpoint, out, data, pose_path, frame, camera, size, mode, png,
                        run.seed, run.threads)
    click.echo(dumps(result))


@cli.command("mesh")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default="mesh.obj", show_default=True,
              help="OBJ output; metrics go next to it as .json")
@click.option("--resolution", type=click.IntRange(min=8), default=128, show_default=True)
@click.option("--samples", type=click.IntRange(min=1), default=100000, show_default=True,
              help="Surface samples per mesh for the metrics")
@click.option("--frame", type=click.IntRange(min=0), default=None)
@pass_run
def mesh_command(run, checkpoint, out, resolution, samples, frame):
    """Extract the canonical mesh and compare it with the analytic body"""
    click.echo(dumps(cmd_mesh(checkpoint, out, resolution, samples, frame, run.seed)))


@cli.command("bench")
@click.option("--rays", "n_rays", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--poses", "n_poses", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--strategy", "strategies", type=click.Choice(list(STRATEGIES)), multiple=True,
              help="Repeatable; all strategies by default")
@click.option("--max-steps", type=click.IntRange(min=1), default=None,
              help="Sphere-tracing steps [config solver.max_steps]")
@click.option("--out", type=click.Path(dir_okay=False), default="bench.csv", show_default=True)
@click.option("--dataset", "data", type=click.Path(), default=None,
              help="Also train every ablation variant on this dataset")
@click.option("--ablate-steps", type=click.IntRange(min=1), default=None,
              help="Training steps per ablation variant [100]")
@click.option("--variant", "variants", multiple=True,
              help="Repeatable; every ablation variant by default")
@pass_run
def bench_command(run, n_rays, n_poses, strategies, max_steps, out, data, ablate_steps,
                  variants):
    """Benchmark joint root finding against the baselines"""
    if data is None and (ablate_steps is not None or variants):
        raise click.UsageError("--ablate-steps and --variant need --dataset")
    rows = cmd_bench(run.settings, n_rays, strategies or tuple(STRATEGIES), n_poses, max_steps)
    write_csv(out, BENCH_COLUMNS, rows)
    summary = {"csv": out, "rows": rows}
    if data is not None:
        ablation = cmd_ablate(run.settings, data, ablate_steps or 100, run.threads,
                              variants or None)
        path = os.path.splitext(out)[0] + "_ablation.csv"
        write_csv(path, ABLATION_COLUMNS, ablation)
        summary["ablation"] = ablation
    click.echo(dumps(summary))


@cli.command("check")
@click.option("--only", type=click.Choice(SUITES), multiple=True,
              help="Repeatable; every suite by default")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Also write the report here")
@pass_run
@click.pass_context
def check_command(ctx, run, only, out):
    """Run the property suites; exits 3 when any fails"""
    report = run_checks(run.seed, list(only) or None)
    if out:
        write_json(out, report)
    click.echo(dumps(report))
    if not report["passed"]:
        ctx.exit(status.EXIT_3_NUMERICAL)
