'''
Run configuration

A config file is a JSON document listing overrides of DEFAULTS. The merged
document is validated against SCHEMA (JSON Schema draft 7) and turned into
an immutable Config tree; builders here turn a Config into the skeleton,
the analytic body, the ground-truth color and the model bundle.
'''

import copy
import logging
from dataclasses import dataclass, asdict, field, replace
from typing import Optional, Tuple
import numpy as np
from jsonschema import Draft7Validator
from avatar.fields import (AnalyticColor, AnalyticSdf, ColorField, ColorNet, ConstantColor,
                           NeuralSdf)
from avatar.formats import read_json
from avatar.losses import LossWeights, MaskParams
from avatar.render import DensityParams, RenderConfig, RENDER_MODES, SAMPLING_MODES
from avatar.skeleton import (PRESETS, AnalyticSkinning, BackwardSkinning, NeuralSkinning,
                             Skeleton)
from avatar.solver import SKINNING_MODES, SolverConfig
from avatar.train import FieldBundle, TrainConfig
from avatar.avatar_exception import ConfigValidationError, InvalidArgument

logger = logging.getLogger("avatar")

FIELD_KINDS = ("neural", "analytic")
COLOR_KINDS = ("neural", "analytic", "constant")

DEFAULTS = {
    "seed": 0,
    "scene": {
        "skeleton": "humanoid",
        "bones": None,
        "tau": 0.05,
        "smooth_k": 0.05,
        "spheres": [],
        "color_seed": 0,
        "ambient": 0.35,
        "chain_count": 3,
    },
    "fields": {
        "sdf": "neural",
        "skinning": "neural",
        "color": "neural",
        "sdf_width": 256,
        "sdf_depth": 5,
        "skinning_width": 128,
        "skinning_depth": 4,
        "color_width": 256,
        "latent_dim": 64,
        "pose_conditioning": True,
        "skinning_mode": "forward",
    },
    "solver": asdict(SolverConfig()),
    "render": asdict(RenderConfig()),
    "train": asdict(TrainConfig()),
    "synth": {
        "frames": 8,
        "cameras": 4,
        "width": 128,
        "height": 128,
        "radius": 3.0,
        "elevation": 0.0,
        "fov": 40.0,
        "amplitude": 0.5,
        "oracle_step": 1e-3,
    },
}

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_NON_NEGATIVE_INT = {"type": "integer", "minimum": 0}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_NON_NEGATIVE = {"type": "number", "minimum": 0}
_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}


def _section(properties: dict) -> dict:
    return {"type": "object", "properties": properties, "required": sorted(properties),
            "additionalProperties": False}


SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "avatar run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "scene", "fields", "solver", "render", "train", "synth"],
    "properties": {
        "seed": _NON_NEGATIVE_INT,
        "scene": _section({
            "skeleton": {"enum": sorted(PRESETS)},
            "bones": {"oneOf": [{"type": "null"}, {
                "type": "array", "minItems": 1,
                "items": {
                    "type": "object", "required": ["parent", "offset", "capsule"],
                    "properties": {
                        "parent": {"type": "integer", "minimum": -1},
                        "offset": _VEC3,
                        "name": {"type": "string"},
                        "capsule": {
                            "type": "object", "required": ["p0", "p1", "radius"],
                            "properties": {"p0": _VEC3, "p1": _VEC3, "radius": _POSITIVE},
                        },
                    },
                },
            }]},
            "tau": _POSITIVE,
            "smooth_k": _POSITIVE,
            "spheres": {"type": "array", "items": {
                "type": "object", "required": ["center", "radius"],
                "properties": {"center": _VEC3, "radius": _POSITIVE},
                "additionalProperties": False,
            }},
            "color_seed": _NON_NEGATIVE_INT,
            "ambient": {"type": "number", "minimum": 0, "maximum": 1},
            "chain_count": _POSITIVE_INT,
        }),
        "fields": _section({
            "sdf": {"enum": list(FIELD_KINDS)},
            "skinning": {"enum": list(FIELD_KINDS)},
            "color": {"enum": list(COLOR_KINDS)},
            "sdf_width": _POSITIVE_INT,
            "sdf_depth": _POSITIVE_INT,
            "skinning_width": _POSITIVE_INT,
            "skinning_depth": _POSITIVE_INT,
            "color_width": _POSITIVE_INT,
            "latent_dim": _NON_NEGATIVE_INT,
            "pose_conditioning": {"type": "boolean"},
            "skinning_mode": {"enum": list(SKINNING_MODES)},
        }),
        "solver": _section({
            "eps": _POSITIVE,
            "max_iterations": _POSITIVE_INT,
            "max_steps": _POSITIVE_INT,
            "hit_threshold": _POSITIVE,
            "damping_halvings": _NON_NEGATIVE_INT,
            "cond_cutoff": _POSITIVE,
            "n_inits": {"enum": [1, 3]},
            "exact_jacobian": {"type": "boolean"},
        }),
        "render": _section({
            "mode": {"enum": list(RENDER_MODES)},
            "sampling": {"enum": list(SAMPLING_MODES)},
            "near_samples": _POSITIVE_INT,
            "far_samples": _POSITIVE_INT,
            "uniform_samples": _POSITIVE_INT,
            "band": _POSITIVE,
            "b_init": _POSITIVE,
            "stratified": {"type": "boolean"},
            "chunk_size": _POSITIVE_INT,
            "margin": _NON_NEGATIVE,
        }),
        "train": _section({
            "steps": _NON_NEGATIVE_INT,
            "fg_rays": _POSITIVE_INT,
            "bg_rays": _POSITIVE_INT,
            "reg_samples": _POSITIVE_INT,
            "pose_noise": _NON_NEGATIVE,
            "view_augment_deg": _NON_NEGATIVE,
            "lr": _NON_NEGATIVE,
            "sdf_lr": _NON_NEGATIVE,
            "latent_lr": _NON_NEGATIVE,
            "weight_decay": _NON_NEGATIVE,
            "latent_weight_decay": _NON_NEGATIVE,
            "prefit_steps": _NON_NEGATIVE_INT,
            "prefit_lr": _NON_NEGATIVE,
            "checkpoint_every": _POSITIVE_INT,
            "log_every": _POSITIVE_INT,
            "max_skipped": _POSITIVE_INT,
            "refine_steps": _NON_NEGATIVE_INT,
            "refine_lr": _NON_NEGATIVE,
            "refine_patience": _POSITIVE_INT,
            "weights": _section({name: _NON_NEGATIVE for name in asdict(LossWeights())}),
        }),
        "synth": _section({
            "frames": _POSITIVE_INT,
            "cameras": _POSITIVE_INT,
            "width": _POSITIVE_INT,
            "height": _POSITIVE_INT,
            "radius": _POSITIVE,
            "elevation": {"type": "number"},
            "fov": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
            "amplitude": _NON_NEGATIVE,
            "oracle_step": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
        }),
    },
}


######################################################################
#  C O N F I G   T R E E
######################################################################
@dataclass(frozen=True)
class SceneConfig:
    skeleton: str = "humanoid"
    bones: Optional[list] = None
    tau: float = 0.05
    smooth_k: float = 0.05
    spheres: list = field(default_factory=list)
    color_seed: int = 0
    ambient: float = 0.35
    chain_count: int = 3


@dataclass(frozen=True)
class FieldsConfig:
    sdf: str = "neural"
    skinning: str = "neural"
    color: str = "neural"
    sdf_width: int = 256
    sdf_depth: int = 5
    skinning_width: int = 128
    skinning_depth: int = 4
    color_width: int = 256
    latent_dim: int = 64
    pose_conditioning: bool = True
    skinning_mode: str = "forward"


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 8
    cameras: int = 4
    width: int = 128
    height: int = 128
    radius: float = 3.0
    elevation: float = 0.0
    fov: float = 40.0
    amplitude: float = 0.5
    oracle_step: float = 1e-3


@dataclass(frozen=True)
class Config:
    scene: SceneConfig
    fields: FieldsConfig
    solver: SolverConfig
    render: RenderConfig
    train: TrainConfig
    synth: SynthConfig
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def with_section(self, name: str, **changes) -> "Config":
        """Copy with some values of one section replaced (validated again)"""
        try:
            section = replace(getattr(self, name), **changes)
        except InvalidArgument as error:
            raise ConfigValidationError(str(error))
        except TypeError as error:
            raise ConfigValidationError("2 VALIDATION: %s" % error)
        return replace(self, **{name: section})

    @classmethod
    def from_dict(cls, document: Optional[dict] = None) -> "Config":
        merged = validate_document(merge_defaults(document or {}))
        train = dict(merged["train"])
        try:
            train["weights"] = LossWeights(**train["weights"])
            return cls(SceneConfig(**merged["scene"]), FieldsConfig(**merged["fields"]),
                       SolverConfig(**merged["solver"]), RenderConfig(**merged["render"]),
                       TrainConfig(**train), SynthConfig(**merged["synth"]), merged["seed"])
        except InvalidArgument as error:
            raise ConfigValidationError(str(error))


def merge_defaults(document: dict, defaults: dict = DEFAULTS) -> dict:
    """Deep merge; lists and scalars in ``document`` replace the defaults"""
    if not isinstance(document, dict):
        raise ConfigValidationError("2 VALIDATION: config must be a JSON object, got %s"
                                    % type(document).__name__)
    merged = copy.deepcopy(defaults)
    for key, value in document.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_defaults(value, merged[key])
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_document(document: dict) -> dict:
    errors = sorted(Draft7Validator(SCHEMA).iter_errors(document), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        where = "/".join(str(part) for part in first.path) or "<root>"
        raise ConfigValidationError("2 VALIDATION: config %s: %s (%d problem%s)"
                                    % (where, first.message, len(errors),
                                       "" if len(errors) == 1 else "s"))
    return document


def load_config(path: Optional[str] = None) -> Config:
    """Defaults when ``path`` is None; otherwise the file's overrides"""
    if path is None:
        return Config.from_dict({})
    config = Config.from_dict(read_json(path))
    logger.info("Loaded config %s", path)
    return config


######################################################################
#  B U I L D E R S
######################################################################
def build_skeleton(scene: SceneConfig) -> Skeleton:
    if scene.bones:
        return Skeleton.deserialize_from_dict({"tau": scene.tau, "bones": scene.bones})
    if scene.skeleton == "chain":
        return PRESETS["chain"](count=scene.chain_count, tau=scene.tau)
    return PRESETS[scene.skeleton](tau=scene.tau)


def scene_spheres(scene: SceneConfig) -> Tuple:
    return tuple((sphere["center"], sphere["radius"]) for sphere in scene.spheres)


def build_body(scene: SceneConfig, skel: Skeleton) -> AnalyticSdf:
    return AnalyticSdf.from_skeleton(skel, scene.smooth_k, scene_spheres(scene))


def build_truth_color(scene: SceneConfig, skel: Skeleton) -> AnalyticColor:
    color = AnalyticColor.palette(skel, scene.color_seed)
    color.ambient = scene.ambient
    return color


def build_model(config: Config, skel: Skeleton, n_frames: int,
                rng: Optional[np.random.Generator] = None) -> FieldBundle:
    """Fresh, deterministically initialized model for ``n_frames`` training frames"""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    spec = config.fields
    body = build_body(config.scene, skel)
    cond_dim = 4 * len(skel) if spec.pose_conditioning else 0
    if spec.sdf == "neural":
        sdf = NeuralSdf.create(cond_dim, rng, spec.sdf_width, spec.sdf_depth, spec.latent_dim)
        feature_dim = sdf.feature_dim
    else:
        sdf = body
        feature_dim = 0
    if spec.skinning_mode == "forward" and spec.skinning == "neural":
        skinning = NeuralSkinning.create(len(skel), rng, spec.skinning_width, spec.skinning_depth)
    else:
        skinning = AnalyticSkinning(skel)
    backward = None
    if spec.skinning_mode == "backward":
        backward = BackwardSkinning.create(len(skel), rng, spec.skinning_width,
                                           spec.skinning_depth)
    color: ColorField
    if spec.color == "neural":
        color = ColorNet.create(feature_dim, spec.latent_dim, rng, spec.color_width)
    elif spec.color == "analytic":
        color = build_truth_color(config.scene, skel)
    else:
        color = ConstantColor()
    latents = rng.normal(0.0, 0.01, size=(max(n_frames, 1), spec.latent_dim))
    logger.debug("Built %s SDF, %s skinning (%s mode), %s color for %d frames", spec.sdf,
                 spec.skinning, spec.skinning_mode, spec.color, n_frames)
    return FieldBundle(skel, body, sdf, skinning, color, DensityParams.from_b(config.render.b_init),
                       MaskParams(), latents, spec.skinning_mode, backward,
                       spec.pose_conditioning)
