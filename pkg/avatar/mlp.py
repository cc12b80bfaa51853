'''
Multi-layer perceptrons on the autodiff tape

Besides the usual forward pass, ``mlp_evaluate`` can push spatial tangents
through the network (forward mode). Tangents are tape tensors too, so a
loss on the spatial gradient (Eikonal) differentiates back to the weights.
'''

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
from avatar import autodiff as ad
from avatar.autodiff import Tape, Tensor
from avatar.avatar_exception import InvalidArgument, ShapeMismatch

logger = logging.getLogger("avatar")

ACTIVATIONS = ("sine", "softplus", "relu", "identity", "sigmoid")
SIREN_FIRST_W0 = 30.0


@dataclass(frozen=True)
class Activation:
    """Activation tag; ``beta`` is used by softplus and ``w0`` by sine"""
    kind: str = "identity"
    beta: float = 100.0
    w0: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise InvalidArgument("2 VALIDATION: unknown activation %s" % self.kind)
        if self.kind == "softplus" and self.beta <= 0:
            raise InvalidArgument("2 VALIDATION: softplus beta must be positive, got %s"
                                  % self.beta)


@dataclass
class Layer:
    """
    Dense layer y = act(x W + b). With weight normalization ``weight`` holds
    the direction V and ``gain`` the per-output magnitude g, W = g V / |V|.
    """
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = field(default_factory=Activation)
    gain: Optional[np.ndarray] = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def weight_norm(self) -> bool:
        return self.gain is not None


@dataclass
class MlpParams:
    """Layer stack; layers in ``skip_layers`` also see the network input"""
    layers: List[Layer]
    skip_layers: Tuple[int, ...] = ()
    name: str = "mlp"

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgument("2 VALIDATION: an MLP needs at least one layer")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            expected = width + (self.input_dim if i in self.skip_layers and i > 0 else 0)
            if layer.in_dim != expected:
                raise ShapeMismatch("2 VALIDATION: layer %d of %s takes %d inputs, expected %d"
                                    % (i, self.name, layer.in_dim, expected))
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeMismatch("2 VALIDATION: layer %d of %s has bias shape %s"
                                    % (i, self.name, layer.bias.shape))
            width = layer.out_dim

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def named_arrays(self) -> Dict[str, np.ndarray]:
        """Every trainable array, keyed by a stable name"""
        out = {}
        for i, layer in enumerate(self.layers):
            out["%s.%d.weight" % (self.name, i)] = layer.weight
            out["%s.%d.bias" % (self.name, i)] = layer.bias
            if layer.weight_norm:
                out["%s.%d.gain" % (self.name, i)] = layer.gain
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copies values into the existing arrays (their identity is kept)"""
        for key, array in self.named_arrays().items():
            if key in arrays:
                if arrays[key].shape != array.shape:
                    raise ShapeMismatch("2 VALIDATION: %s has shape %s, expected %s"
                                        % (key, arrays[key].shape, array.shape))
                array[...] = arrays[key]


@dataclass
class MlpOutput:
    """Network output, its spatial tangent, and the last hidden activations"""
    output: Tensor
    tangent: Optional[Tensor]
    features: Tensor
    feature_tangent: Optional[Tensor]


######################################################################
#  C O N S T R U C T I O N
######################################################################
def build_mlp(dims: Sequence[int], activation: Activation, rng: np.random.Generator,
              final_activation: Activation = Activation("identity"),
              weight_norm: bool = False, skip_layers: Tuple[int, ...] = (),
              zero_final: bool = False, name: str = "mlp") -> MlpParams:
    """
    Builds an MLP with hidden widths ``dims[1:-1]``. Sine networks get
    w0 = 30 on the first layer and the SIREN uniform fan-in scheme.
    """
    if len(dims) < 2:
        raise InvalidArgument("2 VALIDATION: need at least input and output dims, got %s" % (dims,))
    layers = []
    input_dim = dims[0]
    for i in range(len(dims) - 1):
        fan_in = dims[i] + (input_dim if i in skip_layers and i > 0 else 0)
        fan_out = dims[i + 1]
        last = i == len(dims) - 2
        act = final_activation if last else activation
        if act.kind == "sine" and i == 0:
            act = Activation("sine", act.beta, SIREN_FIRST_W0)
        weight, bias = _init_layer(fan_in, fan_out, act, first=(i == 0), rng=rng)
        zeroed = last and zero_final
        if zeroed:
            bias = np.zeros_like(bias)
            if not weight_norm:
                weight = np.zeros_like(weight)
        gain = None
        if weight_norm:
            # zero gain with a random direction keeps g V / |V| finite
            gain = np.zeros(fan_out) if zeroed else np.linalg.norm(weight, axis=0)
        layers.append(Layer(weight, bias, act, gain))
    return MlpParams(layers, tuple(skip_layers), name)


def _init_layer(fan_in: int, fan_out: int, act: Activation, first: bool,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if act.kind == "sine":
        bound = 1.0 / fan_in if first else math.sqrt(6.0 / fan_in) / act.w0
        bias_bound = 1.0 / math.sqrt(fan_in)
        return (rng.uniform(-bound, bound, (fan_in, fan_out)),
                rng.uniform(-bias_bound, bias_bound, fan_out))
    if act.kind in ("relu", "softplus"):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)


######################################################################
#  F O R W A R D
######################################################################
def bind(array: np.ndarray, tape: Optional[Tape], name: Optional[str] = None) -> Tensor:
    """A parameter array as a tape leaf, or as a constant without a tape"""
    return tape.watch(array, name) if tape is not None else Tensor(array)


def layer_weight(layer: Layer, tape: Optional[Tape]) -> Tensor:
    weight = bind(layer.weight, tape)
    if not layer.weight_norm:
        return weight
    gain = bind(layer.gain, tape)
    return weight * (gain / ad.norm(weight, axis=0))


def activate(act: Activation, z: Tensor, dz: Optional[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
    """Applies an activation to pre-activations and their tangents"""
    if act.kind == "identity":
        return z, dz
    if act.kind == "sine":
        scaled = z * act.w0 if act.w0 != 1.0 else z
        out = ad.sin(scaled)
        slope = ad.cos(scaled) * act.w0 if dz is not None else None
    elif act.kind == "softplus":
        out = ad.softplus(z, act.beta)
        slope = ad.sigmoid(z * act.beta) if dz is not None else None
    elif act.kind == "relu":
        out = ad.relu(z)
        slope = ad.step(z) if dz is not None else None
    else:
        out = ad.sigmoid(z)
        slope = out * (1.0 - out) if dz is not None else None
    return out, (slope * dz if dz is not None else None)


def spatial_tangent(count: int, input_dim: int) -> Tensor:
    """Tangent of an input whose first three columns are the query point"""
    tangent = np.zeros((3, count, input_dim))
    for k in range(3):
        tangent[k, :, k] = 1.0
    return Tensor(tangent)


def mlp_evaluate(params: MlpParams, x: Tensor, tape: Optional[Tape] = None,
                 tangent: Optional[Tensor] = None,
                 film: Optional[Sequence[Tuple[Tensor, Tensor]]] = None) -> MlpOutput:
    """
    Runs the network on x of shape (N, input_dim). ``tangent`` (3, N,
    input_dim) is pushed forward alongside. ``film`` gives a (scale,
    offset) pair per layer except the last, applied to the linear output.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != params.input_dim:
        raise ShapeMismatch("2 VALIDATION: %s expects %d inputs, got %s"
                            % (params.name, params.input_dim, x.shape))
    if film is not None and len(film) != len(params.layers) - 1:
        raise ShapeMismatch("2 VALIDATION: %s needs %d FiLM pairs, got %d"
                            % (params.name, len(params.layers) - 1, len(film)))
    h, dh = x, tangent
    features, feature_tangent = x, tangent
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        if i in params.skip_layers and i > 0:
            h = ad.concat([h, x], axis=-1)
            if dh is not None:
                dh = ad.concat([dh, tangent], axis=-1)
        if i == last:
            features, feature_tangent = h, dh
        weight = layer_weight(layer, tape)
        z = h @ weight + bind(layer.bias, tape)
        dz = dh @ weight if dh is not None else None
        if film is not None and i < last:
            scale, offset = film[i]
            z = z * scale + offset
            if dz is not None:
                dz = dz * scale
        h, dh = activate(layer.activation, z, dz)
    return MlpOutput(h, dh, features, feature_tangent)


def mlp_forward(params: MlpParams, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Plain forward pass; parameters become leaves of ``tape`` when one is given"""
    return mlp_evaluate(params, x, tape).output


def mlp_forward_reference(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Straight-line numpy evaluation, used as an independent check"""
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(params.layers):
        if i in params.skip_layers and i > 0:
            h = np.concatenate([h, x], axis=-1)
        weight = layer.weight
        if layer.weight_norm:
            weight = weight * (layer.gain / np.linalg.norm(weight, axis=0))
        z = h @ weight + layer.bias
        kind = layer.activation.kind
        if kind == "sine":
            h = np.sin(layer.activation.w0 * z)
        elif kind == "softplus":
            h = np.logaddexp(0.0, layer.activation.beta * z) / layer.activation.beta
        elif kind == "relu":
            h = np.maximum(z, 0.0)
        elif kind == "sigmoid":
            h = ad.np_sigmoid(z)
        else:
            h = z
    return h


def collect_gradients(tape: Tape, arrays: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Gradient of every named parameter array from a finished backward pass; zeros where unused"""
    return {key: tape.grad_of(array) for key, array in arrays.items()}
