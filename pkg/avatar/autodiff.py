'''
Reverse-mode automatic differentiation over dense numpy tensors

A Tape records every primitive applied to tensors that require gradients,
in execution order. ``Tape.backward`` walks the records once, in reverse,
accumulating adjoints. Operations whose inputs are all constants are
evaluated eagerly and never recorded, so the same field code serves both
plain numeric evaluation and differentiable training passes.
'''

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from scipy.special import expit
from avatar.avatar_exception import InvalidArgument, NotOnTape, NonFiniteValue, ShapeMismatch

logger = logging.getLogger("avatar")

ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """A value on (or off) a tape, with its gradient accumulator"""
    __array_priority__ = 1000

    def __init__(self, value, tape: Optional["Tape"] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape if requires_grad else None
        self.requires_grad = requires_grad and tape is not None
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id = tape._register(self) if self.requires_grad else -1

    def __repr__(self):
        return "<Tensor %s shape=%s grad=%s>" % (self.name or self.node_id,
                                                 self.value.shape, self.requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...],
                 vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of primitive operations"""

    def __init__(self):
        self.records: List[_Record] = []
        self.nodes: List[Tensor] = []
        self.adjoint_calls = 0
        self._watched: Dict[int, Tensor] = {}

    def _register(self, node: Tensor) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.records)

    def variable(self, value, name: Optional[str] = None) -> Tensor:
        """A fresh leaf that requires gradients"""
        return Tensor(np.array(value, dtype=np.float64), self, True, name)

    def watch(self, array: np.ndarray, name: Optional[str] = None) -> Tensor:
        """
        The leaf bound to a parameter array. Repeated calls with the same
        array return the same leaf, so gradients from every use accumulate.
        """
        key = id(array)
        leaf = self._watched.get(key)
        if leaf is None:
            leaf = Tensor(array, self, True, name)
            leaf._source = array
            self._watched[key] = leaf
        return leaf

    def grad_of(self, array: np.ndarray) -> np.ndarray:
        """Gradient accumulated for a watched parameter array (zeros if unreached)"""
        leaf = self._watched.get(id(array))
        if leaf is None or leaf.grad is None:
            return np.zeros_like(array, dtype=np.float64)
        return leaf.grad

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """
        Accumulates d(output)/d(node) into every reachable node's ``grad``.
        Returns gradients keyed by node id; unreached nodes map to zeros.
        """
        if not isinstance(output, Tensor) or output.tape is not self:
            raise NotOnTape("3 NUMERICAL: backward called on a tensor that is not on this tape")
        for node in self.nodes:
            node.grad = None
        if seed is None:
            if output.value.size != 1:
                raise InvalidArgument("2 VALIDATION: non-scalar output of shape %s needs a seed "
                                      "gradient" % (output.shape,))
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeMismatch("2 VALIDATION: seed shape %s does not match output %s"
                                % (seed.shape, output.shape))
        output.grad = seed.copy()
        for record in reversed(self.records):
            upstream = record.out.grad
            if upstream is None:
                continue
            grads = record.vjp(upstream)
            self.adjoint_calls += 1
            for node, grad in zip(record.inputs, grads):
                if grad is None or not node.requires_grad:
                    continue
                grad = _unbroadcast(np.asarray(grad, dtype=np.float64), node.shape)
                node.grad = grad if node.grad is None else node.grad + grad
        return {node.node_id: node.grad if node.grad is not None else np.zeros_like(node.value)
                for node in self.nodes}


######################################################################
#  H E L P E R S
######################################################################
def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x: ArrayLike) -> Tensor:
    """A copy of the value that no gradient flows through"""
    return Tensor(x.value if isinstance(x, Tensor) else x)


detach = constant


def value_of(x: ArrayLike) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back to ``shape``"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _result(value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = None
    for node in inputs:
        if node.requires_grad:
            if tape is None:
                tape = node.tape
            elif node.tape is not tape:
                raise InvalidArgument("2 VALIDATION: operands live on different tapes")
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape, True)
    tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


######################################################################
#  P R I M I T I V E S
######################################################################
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _result(out, (a, b), lambda g: (g / b.value, -g * out / b.value))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.value, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise InvalidArgument("2 VALIDATION: only constant exponents are supported")
    return _result(a.value ** exponent, (a,),
                   lambda g: (g * exponent * a.value ** (exponent - 1),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("2 VALIDATION: matmul needs operands with ndim >= 2, got %s @ %s"
                            % (a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("2 VALIDATION: cannot multiply %s by %s" % (a.shape, b.shape))
    return _result(np.matmul(a.value, b.value), (a, b),
                   lambda g: (np.matmul(g, np.swapaxes(b.value, -1, -2)),
                              np.matmul(np.swapaxes(a.value, -1, -2), g)))


def inverse(a: ArrayLike) -> Tensor:
    """Batched inverse of square matrices (..., n, n)"""
    a = as_tensor(a)
    out = np.linalg.inv(a.value)

    def vjp(g):
        out_t = np.swapaxes(out, -1, -2)
        return (-np.matmul(out_t, np.matmul(g, out_t)),)
    return _result(out, (a,), vjp)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return _result(out, (a,), vjp)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _result(out, (a,), lambda g: (0.5 * g / np.maximum(out, 1e-300),))


def tabs(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np_sigmoid(a.value)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: ArrayLike, beta: float = 1.0) -> Tensor:
    """log(1 + exp(beta a)) / beta"""
    if beta <= 0:
        raise InvalidArgument("2 VALIDATION: softplus beta must be positive, got %s" % beta)
    a = as_tensor(a)
    out = np.logaddexp(0.0, beta * a.value) / beta
    return _result(out, (a,), lambda g: (g * np_sigmoid(beta * a.value),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),))


def step(a: ArrayLike) -> Tensor:
    """Heaviside step; piecewise constant, so nothing flows through it"""
    return Tensor((value_of(a) > 0).astype(np.float64))


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.value > low) & (a.value < high)
    return _result(np.clip(a.value, low, high), (a,), lambda g: (g * inside,))


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    condition = np.asarray(condition, dtype=bool)
    return _result(np.where(condition, a.value, b.value), (a, b),
                   lambda g: (np.where(condition, g, 0.0), np.where(condition, 0.0, g)))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)
    count = len(tensors)
    return _result(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)
    return _result(a.value[index], (a,), vjp)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: ArrayLike, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.value, axis1, axis2), (a,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def expand_dims(a: ArrayLike, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def broadcast_to(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    return _result(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (g,))


def cumsum(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _result(np.cumsum(a.value, axis=axis), (a,),
                   lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def amin(a: ArrayLike, axis: int = -1) -> Tensor:
    """Minimum along an axis; the gradient goes to the first minimizer"""
    a = as_tensor(a)
    index = np.expand_dims(np.argmin(a.value, axis=axis), axis)
    out = np.take_along_axis(a.value, index, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, index, np.expand_dims(g, axis), axis=axis)
        return (full,)
    return _result(out, (a,), vjp)


######################################################################
#  C O M P O S I T E S
######################################################################
def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a - constant(a.value.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / tsum(e, axis=axis, keepdims=True)


def norm(a: ArrayLike, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    return sqrt(tsum(square(a), axis=axis, keepdims=keepdims) + eps)


def dot(a: ArrayLike, b: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    return tsum(mul(a, b), axis=axis, keepdims=keepdims)


def matvec(matrix: ArrayLike, vector: ArrayLike) -> Tensor:
    """(..., m, n) times (..., n) -> (..., m)"""
    product = matmul(matrix, expand_dims(vector, -1))
    return reshape(product, product.shape[:-1])


def np_sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


######################################################################
#  G R A D I E N T   C H E C K I N G
######################################################################
def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-6) -> float:
    """
    Compares the tape gradient of a scalar function with central
    differences. Returns max |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise InvalidArgument("2 VALIDATION: finite-difference step must be positive, got %s" % h)
    x0 = np.array(value_of(x), dtype=np.float64)
    tape = Tape()
    leaf = tape.variable(x0.copy(), "x")
    out = f(leaf)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteValue("3 NUMERICAL: function value is not finite")
    if out.requires_grad:
        tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        shifted = x0.copy().reshape(-1)
        shifted[i] += h
        f_plus = f(Tensor(shifted.reshape(x0.shape))).value
        shifted[i] -= 2 * h
        f_minus = f(Tensor(shifted.reshape(x0.shape))).value
        if not (np.all(np.isfinite(f_plus)) and np.all(np.isfinite(f_minus))):
            raise NonFiniteValue("3 NUMERICAL: function value is not finite near coordinate %d" % i)
        flat[i] = (float(f_plus) - float(f_minus)) / (2 * h)
    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(error.max()) if error.size else 0.0
