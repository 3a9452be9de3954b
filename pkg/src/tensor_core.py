"""
src/tensor_core.py - Dense Tensors with Tape-Based Reverse-Mode Autodiff

A deliberately small tensor layer: numpy arrays underneath, and exactly the
differentiable operations the encoder, projection head and losses need.

RECORDING MODEL:
    Ops record onto the Tape that is active on the current thread, and only
    when at least one operand needs a gradient (a parameter with
    requires_grad=True, or the result of an already-recorded op). Anything
    computed outside a Tape, or from constants only (the teacher path), is a
    plain constant with no node.

        with Tape() as tape:
            f, g = student.forward(views)
            loss = loss_total(...)
        backward(loss)          # visits tape nodes in exact reverse order

BROADCASTING:
    None in general. Binary ops accept equal shapes, a python scalar, or a
    "row" operand whose shape equals the trailing dimensions of the other
    (bias vectors, positional embeddings, layer-norm gains). Matmul accepts
    (..., m, k) @ (k, n) and equal-leading-dims batched products.

GRADIENTS:
    backward() assigns (does not accumulate) the gradient of every leaf that
    requires a gradient and appears on the tape, so replaying a tape yields
    bitwise-identical grads.

FUNCTIONS:
----------
    matmul, add, sub, mul, mul_scalar, exp, log_clamped, relu, gelu, sum,
    mean, transpose, reshape, layer_norm, softmax_temp, backward,
    numerical_gradient, relative_error, set_default_dtype
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from src.exceptions import DimensionError, NumericalError, ParameterError, UsageError


_DTYPES = {'float64': np.float64, 'float32': np.float32}
_default_dtype = np.float64

LOG_EPS = 1e-12

_local = threading.local()


def set_default_dtype(name: str) -> None:
    """Select 'float64' (default) or 'float32' for newly created tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ParameterError(f"Unknown dtype '{name}', expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"Non-finite values produced by '{op}'", {'op': op})


# =============================================================================
# TENSOR + TAPE
# =============================================================================

class Tensor:
    """n-dimensional real array, optionally participating in a gradient tape."""

    __slots__ = ('data', 'requires_grad', 'grad', '_node', 'name')

    def __init__(self, data, requires_grad: bool = False, name: str = None, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"Tensor shape must be positive, got {arr.shape}")
        _check_finite(arr, 'create')
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @classmethod
    def _from_array(cls, arr: np.ndarray, op: str) -> 'Tensor':
        _check_finite(arr, op)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def needs_grad(self) -> bool:
        return self.requires_grad or self._node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor._from_array(self.data, 'detach')

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad}{tag}>"

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] = None):
        return transpose(self, axes)


class Node:
    """One recorded differentiable op."""

    __slots__ = ('op', 'inputs', 'output', 'backward_fn', 'tape')

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable, tape: 'Tape'):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """
    Ordered record of executed differentiable ops.

    Confined to one thread and, by convention, one training step.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._previous = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> 'Tape':
        self._previous = getattr(_local, 'tape', None)
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = self._previous
        self._previous = None
        return False


def active_tape() -> Optional[Tape]:
    return getattr(_local, 'tape', None)


@contextmanager
def no_grad():
    """Suspend recording (teacher forwards, evaluation)."""
    previous = getattr(_local, 'tape', None)
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


def _result(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor._from_array(arr, op)
    tape = active_tape()
    if tape is not None and any(t.needs_grad for t in inputs):
        node = Node(op, inputs, out, backward_fn, tape)
        out._node = node
        tape.record(node)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# =============================================================================
# ELEMENTWISE
# =============================================================================

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _result('add', a.data + b, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_binary(a, b, 'add')
    return _result('add', a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _result('sub', a.data - b, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_binary(a, b, 'sub')
    return _result('sub', a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_binary(a, b, 'mul')
    return _result('mul', a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result('mul_scalar', a.data * s, (a,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result('exp', out, (x,), lambda g: (g * out,))


def log_clamped(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(x, eps)); the clamp keeps cross-entropy finite at zero probability."""
    if eps <= 0:
        raise ParameterError(f"log_clamped eps must be > 0, got {eps}")
    clamped = np.maximum(x.data, eps)
    live = x.data > eps
    return _result('log_clamped', np.log(clamped), (x,),
                   lambda g: (np.where(live, g / clamped, 0.0),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result('relu', np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _result('gelu', x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# =============================================================================
# REDUCTIONS + SHAPE
# =============================================================================

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result('sum', np.asarray(out), (x,), backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul_scalar(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def transpose(x: Tensor, axes: Sequence[int] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _result('transpose', np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from e
    return _result('reshape', out, (x,), lambda g: (g.reshape(x.shape),))


# =============================================================================
# LINEAR ALGEBRA + FUSED
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    (..., m, k) @ (k, n)  or  (..., m, k) @ (..., k, n) with equal leading dims.

    Gradients: a.grad += dOut . b^T, b.grad += a^T . dOut
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def backward_fn(g):
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return grad_a, grad_b
    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        def backward_fn(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    else:
        raise DimensionError(f"matmul: leading dims differ {a.shape} vs {b.shape}")
    return _result('matmul', a.data @ b.data, (a, b), backward_fn)


def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Row softmax of logits / tau over the last axis, max-subtracted for stability."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {tau}")
    if logits.shape[-1] < 2:
        raise DimensionError(f"softmax needs K >= 2 classes, got shape {logits.shape}")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / tau,)

    return _result('softmax_temp', p, (logits,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; a constant row maps to beta."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: gain/bias {gamma.shape} do not match {x.shape}")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward_fn(g):
        dxhat = g * gamma.data
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result('layer_norm', xhat * gamma.data + beta.data, (x, gamma, beta), backward_fn)


# =============================================================================
# BACKWARD
# =============================================================================

def backward(loss: Tensor) -> None:
    """
    Populate .grad of every requires_grad leaf on loss's tape with d(loss)/d(leaf).

    Raises:
        UsageError: loss is not a scalar, or nothing was recorded for it
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or not loss._node.tape.nodes:
        raise UsageError("backward() called on a loss with no recorded operations")

    tape = loss._node.tape
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        contributions = node.backward_fn(g)
        for tensor, contribution in zip(node.inputs, contributions):
            if contribution is None or not tensor.needs_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution
            if tensor._node is None:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        if tensor.requires_grad:
            tensor.grad = np.asarray(grads[key], dtype=tensor.data.dtype).reshape(tensor.shape)


# =============================================================================
# GRADIENT CHECK HELPERS
# =============================================================================

def numerical_gradient(fn: Callable[[], float], tensor: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar fn() w.r.t. tensor.data (perturbed in place)."""
    flat = tensor.data.reshape(-1)
    if not np.shares_memory(flat, tensor.data):
        raise UsageError("numerical_gradient needs a contiguous tensor")
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = fn()
        flat[i] = original - h
        f_minus = fn()
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tensor.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)
