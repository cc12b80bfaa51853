'''
Adam with bias correction, decoupled weight decay and parameter groups
'''

import logging
from dataclasses import dataclass, field
from typing import Dict, List
import numpy as np
from avatar.avatar_exception import InvalidArgument, ShapeMismatch

logger = logging.getLogger("avatar")


@dataclass
class AdamState:
    """Moments and hyper-parameters for one parameter group"""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise InvalidArgument("2 VALIDATION: Adam needs lr >= 0, weight_decay >= 0 and eps > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidArgument("2 VALIDATION: Adam betas must lie in [0, 1)")
        if self.step < 0:
            raise InvalidArgument("2 VALIDATION: Adam step counter must be >= 0")

    def serialize_to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "weight_decay": self.weight_decay, "step": self.step,
        }


def _all_finite(grads: Dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> bool:
    """
    One in-place Adam update of ``params``. Weight decay is decoupled
    (p <- p - lr * wd * p) and only applied when the state carries one.
    Returns False, leaving everything untouched, if any gradient is not finite.
    """
    for key, param in params.items():
        if key not in grads:
            raise InvalidArgument("2 VALIDATION: no gradient for parameter %s" % key)
        if grads[key].shape != param.shape:
            raise ShapeMismatch("2 VALIDATION: gradient for %s has shape %s, expected %s"
                                % (key, grads[key].shape, param.shape))
    if not _all_finite(grads):
        logger.warning("Skipping Adam step %d: non-finite gradient", state.step + 1)
        return False

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for key, param in params.items():
        g = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        if state.weight_decay:
            param -= state.lr * state.weight_decay * param
        param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


@dataclass
class ParamGroup:
    """Named arrays sharing one learning rate and weight-decay setting"""
    name: str
    params: Dict[str, np.ndarray]
    state: AdamState


class Optimizer:
    """
    Steps several parameter groups together. A non-finite gradient in any
    group skips the whole step so groups never drift out of sync.
    """

    def __init__(self, groups: List[ParamGroup]):
        names = [group.name for group in groups]
        if len(set(names)) != len(names):
            raise InvalidArgument("2 VALIDATION: duplicate parameter group names %s" % names)
        self.groups = groups
        self.skipped = 0

    def group(self, name: str) -> ParamGroup:
        for group in self.groups:
            if group.name == name:
                return group
        raise InvalidArgument("2 VALIDATION: no parameter group named %s" % name)

    def step(self, grads: Dict[str, np.ndarray]) -> bool:
        """``grads`` maps parameter names (across all groups) to gradients"""
        for group in self.groups:
            if not _all_finite({k: grads[k] for k in group.params if k in grads}):
                self.skipped += 1
                logger.warning("Skipping optimizer step: non-finite gradient in group %s",
                               group.name)
                return False
        for group in self.groups:
            adam_step(group.params, {k: grads.get(k, np.zeros_like(p))
                                     for k, p in group.params.items()}, group.state)
        return True

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moment buffers keyed for checkpointing"""
        out = {}
        for group in self.groups:
            for key in group.params:
                if key in group.state.m:
                    out["adam.m.%s" % key] = group.state.m[key]
                    out["adam.v.%s" % key] = group.state.v[key]
        return out

    def state_header(self) -> dict:
        return {group.name: group.state.serialize_to_dict() for group in self.groups}

    def load_state(self, header: dict, arrays: Dict[str, np.ndarray]) -> None:
        for group in self.groups:
            saved = header.get(group.name)
            if saved is None:
                continue
            group.state.step = int(saved["step"])
            for key in group.params:
                if "adam.m.%s" % key in arrays:
                    group.state.m[key] = arrays["adam.m.%s" % key].copy()
                    group.state.v[key] = arrays["adam.v.%s" % key].copy()
