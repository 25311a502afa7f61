#!/usr/bin/env python3
"""
Autodiff - Tape-based reverse-mode automatic differentiation over numpy arrays.

Tensors are thin wrappers around ``numpy.ndarray``. While a ``Tape`` is active
(``with Tape() as tape:``) every op whose inputs require gradients appends a
node holding its vector-Jacobian product; ``backward`` replays the nodes in
reverse order. Outside a tape, ops simply compute values.

A tape belongs to the thread that opened it. Intermediate tensors produced on
another tape enter the current tape as constants, which is how nested tapes
(the VAT direction search) stay isolated from the outer training pass.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-7

_DEFAULT_DTYPE = np.float64
_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 for checks, float32 allowed for training)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported dtype: {dtype}")
    _DEFAULT_DTYPE = dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "node_id")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional["Tape"] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    op: str
    parents: Tuple[Optional[int], ...]
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: Tuple[int, ...]


class Tape:
    """Topologically ordered record of the forward computation."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._leaves: Dict[int, int] = {}
        self._leaf_refs: List[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, tensor: Tensor) -> int:
        """Register a leaf tensor and return its node id on this tape."""
        key = id(tensor)
        if key not in self._leaves:
            self._leaves[key] = len(self.nodes)
            self._leaf_refs.append(tensor)
            self.nodes.append(Node("leaf", (), None, tensor.shape))
        return self._leaves[key]

    def node_of(self, tensor: Tensor) -> Optional[int]:
        if tensor._tape is self:
            return tensor.node_id
        return self._leaves.get(id(tensor))

    def _track(self, tensor: Tensor) -> Optional[int]:
        if not tensor.requires_grad:
            return None
        if tensor._tape is self:
            return tensor.node_id
        if tensor._tape is None:
            return self.watch(tensor)
        # intermediate of another tape: constant here
        return None

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        if self.consumed:
            raise TapeError(f"{op}: tape already consumed by backward")
        parents = tuple(self._track(t) for t in inputs)
        if all(p is None for p in parents):
            return Tensor(out)
        result = Tensor(out, requires_grad=True)
        result._tape = self
        result.node_id = len(self.nodes)
        self.nodes.append(Node(op, parents, vjp, out.shape))
        return result


def _stack() -> List[Optional[Tape]]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; ops inside produce constants."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@contextmanager
def frozen(tensors: Sequence[Tensor]) -> Iterator[None]:
    """Temporarily mark tensors as not requiring gradients."""
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Return d(loss)/d(leaf) for every leaf watched by ``tape``.

    The tape is consumed: recording onto it afterwards raises ``TapeError``. A loss
    not recorded on ``tape`` is rejected as detached; use ``gradients`` for constants.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss._tape is not tape:
        raise TapeError("backward: loss is detached from this tape")
    if tape.consumed:
        raise TapeError("backward: tape already consumed")

    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg

    result = {}
    for leaf in tape._leaf_refs:
        nid = tape._leaves[id(leaf)]
        g = grads[nid]
        result[nid] = g if g is not None else np.zeros_like(leaf.data)
    tape.consumed = True
    return result


def gradients(tape: Tape, loss: Tensor, tensors: Sequence[Tensor]) -> List[np.ndarray]:
    """Run ``backward`` and return gradients aligned with ``tensors`` (zeros if unreached).

    A loss that depends on no watched tensor is a constant: its gradients are all zeros.
    ``backward`` itself still rejects such a loss as detached.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise TapeError(f"gradients: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        if tape.consumed:
            raise TapeError("gradients: tape already consumed")
        tape.consumed = True
        return [np.zeros_like(t.data) for t in tensors]
    grad_map = backward(tape, loss)
    out = []
    for t in tensors:
        nid = tape.node_of(t)
        out.append(grad_map[nid] if nid in grad_map else np.zeros_like(t.data))
    return out


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _finish(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite output")
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out)
    return tape.record(op, inputs, out, vjp)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _finish("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    return _finish("div", (a, b), a.data / b.data,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _finish("neg", (a,), -a.data, lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _finish("power", (a,), a.data ** exponent,
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _finish("exp", (a,), out, lambda g: (g * out,))


def log(a: ArrayLike, clamp_eps: float = CLAMP_EPS) -> Tensor:
    """Natural log of ``max(a, clamp_eps)``; no gradient flows through clamped entries."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, clamp_eps)
    live = a.data > clamp_eps
    return _finish("log", (a,), np.log(clamped), lambda g: (g * live / clamped,))


def abs_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _finish("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finish("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def leaky_relu(a: ArrayLike, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finish("leaky_relu", (a,), np.where(mask, a.data, slope * a.data),
                   lambda g: (g * np.where(mask, 1.0, slope),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _finish("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def clamp(a: ArrayLike, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _finish("clamp", (a,), np.clip(a.data, low, high), lambda g: (g * inside,))


def minimum(a: ArrayLike, cap: float) -> Tensor:
    """``min(a, cap)`` with a constant cap; the gradient is zero where the cap is active."""
    a = as_tensor(a)
    below = a.data < cap
    return _finish("minimum", (a,), np.where(below, a.data, cap), lambda g: (g * below,))


def stop_gradient(a: ArrayLike) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _finish("sum", (a,), out, lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean: empty input")
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.size, 1)
    return _finish("mean", (a,), out,
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _finish("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def flatten(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concatenate: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _finish("concatenate", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def l1_norm(a: ArrayLike, axis: int = -1) -> Tensor:
    return sum_(abs_(a), axis=axis)


def sq_norm(a: ArrayLike, axis=-1) -> Tensor:
    a = as_tensor(a)
    return sum_(mul(a, a), axis=axis)


# ---------------------------------------------------------------------------
# linear algebra, softmax family, convolution, pooling
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _finish("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _finish("softmax", (a,), out,
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _finish("log_softmax", (a,), out,
                   lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def conv2d(x: ArrayLike, w: ArrayLike, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation of NCHW ``x`` with FCkk ``w`` (``same`` or ``valid``)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d: unsupported padding {padding!r}")
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same padding needs odd kernels, got {w.shape}")
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,fcij->nfhw", windows, w.data, optimize=True)
    ho, wo = out.shape[2], out.shape[3]

    def vjp(g):
        gw = np.einsum("nfhw,nchwij->fcij", g, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("nfhw,fc->nchw", g, w.data[:, :, i, j])
        gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        return gx, gw

    return _finish("conv2d", (x, w), out, vjp)


def max_pool2d(x: ArrayLike, size: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // size, w // size, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gblocks.reshape(n, c, h, w),)

    return _finish("max_pool2d", (x,), out, vjp)


def global_avg_pool(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    return mean(x, axis=(2, 3))


OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "power": power,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "abs": abs_,
    "clamp": clamp,
    "minimum": minimum,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum_,
    "mean": mean,
    "l1_norm": l1_norm,
    "sq_norm": sq_norm,
    "reshape": reshape,
    "concatenate": concatenate,
    "max_pool2d": max_pool2d,
    "global_avg_pool": global_avg_pool,
}


def forward_op(op: str, *inputs, **attrs) -> Tensor:
    """Dispatch a registered op by name."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ShapeError(f"unknown op {op!r}") from None
    return fn(*inputs, **attrs)


def grad_check(fn: Callable[..., Tensor], point: Union[Tensor, Sequence[Tensor]],
               step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` is called with the point tensors as positional arguments and must
    return a scalar. Point data is perturbed in place and restored afterwards,
    so ``fn`` may also close over the same tensors (e.g. network parameters).
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    points = [point] if isinstance(point, Tensor) else list(point)
    saved_flags = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
    try:
        with Tape() as tape:
            out = fn(*points)
        if out.data.size != 1 or out.ndim != 0:
            raise TapeError(f"grad_check: function output must be scalar, got shape {out.shape}")
        analytic = gradients(tape, out, points)

        worst = 0.0
        with no_grad():
            for p, a in zip(points, analytic):
                base = p.data
                for idx in np.ndindex(base.shape):
                    plus = base.copy()
                    plus[idx] += step
                    p.data = plus
                    f_plus = float(fn(*points).data)
                    minus = base.copy()
                    minus[idx] -= step
                    p.data = minus
                    f_minus = float(fn(*points).data)
                    p.data = base
                    numeric = (f_plus - f_minus) / (2.0 * step)
                    denom = max(abs(a[idx]), abs(numeric), floor)
                    worst = max(worst, abs(a[idx] - numeric) / denom)
        return worst
    finally:
        for p, flag in zip(points, saved_flags):
            p.requires_grad = flag
