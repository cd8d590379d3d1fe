"""Reverse-mode automatic differentiation over dense NumPy arrays.

Provides exactly the primitives the segmentation network and its losses
need: same-shape elementwise arithmetic, log/clamp, 2-D matrix products,
a stable channel softmax, 3x3 zero-padded convolution, 2x2 max-pooling,
nearest-neighbour 2x upsampling, channel concatenation, a per-pixel
linear head, and sum/mean reductions. Training runs in float32; gradient
checking runs in float64.

Every forward op is pure: inputs are never mutated and repeated calls
return bit-identical results. Backward accumulates additively into leaf
``grad`` buffers, so a value used k times receives k contributions.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation, teachers)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array with an optional autodiff record.

    ``data`` is a C-contiguous float32/float64 ndarray, ``grad`` (filled by
    :func:`backward`) matches its shape, ``op`` names the producing
    operation ("leaf" for inputs/parameters) and ``parents`` links the
    acyclic graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; scalars are plain Python floats, tensors must match shape
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _is_number(x) -> bool:
    return isinstance(x, (int, float))


def _node(data, parents, op: str, backward: Callable[[np.ndarray], None]) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, op=op, parents=parents if track else ())
    if track:
        out._backward = backward
    return out


def _acc(t: Tensor, g) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_acc(a, g), _acc(b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_acc(a, g), _acc(b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: (_acc(a, g * b.data), _acc(b, g * a.data)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), "scale", lambda g: _acc(a, g * c))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + float(c), (a,), "add_scalar", lambda g: _acc(a, g))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), "log", lambda g: _acc(a, g / a.data))


def clamp_min(a: Tensor, bound: float) -> Tensor:
    # subgradient: pass-through where the input is not clamped
    out = np.maximum(a.data, bound)
    return _node(out, (a,), "clamp_min",
                 lambda g: _acc(a, g * (a.data >= bound)))


def relu(a: Tensor) -> Tensor:
    return _node(np.maximum(a.data, 0), (a,), "relu",
                 lambda g: _acc(a, g * (a.data > 0)))


# ---------------------------------------------------------------------------
# 2-D linear algebra (for the prototype Gram matrix)

def matmul2(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul2: incompatible shapes {a.shape} x {b.shape}")

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul2", bwd)


def transpose2(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose2: expected rank 2, got shape {a.shape}")
    return _node(np.ascontiguousarray(a.data.T), (a,), "transpose2",
                 lambda g: _acc(a, np.ascontiguousarray(g.T)))


# ---------------------------------------------------------------------------
# spatial ops

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 on each border."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d: input and kernel must have rank 4")
    if kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernel spatial size must be 3x3, got {kernel.shape[2:]}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[0]},)")

    def bwd(g):
        gx, gk, gb = kernels.conv2d_backward(x.data, kernel.data,
                                             np.ascontiguousarray(g))
        _acc(x, gx)
        _acc(kernel, gk)
        _acc(bias, gb)

    return _node(kernels.conv2d_forward(x.data, kernel.data, bias.data),
                 (x, kernel, bias), "conv2d", bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max; ties go to the first window element."""
    if x.data.ndim != 4:
        raise ValueError("maxpool2x2: expected rank 4")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"maxpool2x2: H and W must be even, got {x.shape[2:]}")
    out, idx = kernels.maxpool_forward(x.data)
    return _node(out, (x,), "maxpool2x2",
                 lambda g: _acc(x, kernels.maxpool_backward(idx, np.ascontiguousarray(g))))


def upsample_nearest2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError("upsample_nearest2x2: expected rank 4")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        b, c, h2, w2 = g.shape
        _acc(x, g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _node(out, (x,), "upsample_nearest2x2", bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels: expected rank 4")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    c1 = a.shape[1]

    def bwd(g):
        _acc(a, g[:, :c1])
        _acc(b, g[:, c1:])

    return _node(np.concatenate((a.data, b.data), axis=1), (a, b),
                 "concat_channels", bwd)


def channel_linear(features: Tensor, weight: Tensor) -> Tensor:
    """Per-pixel linear map: out[b,k,h,w] = sum_n weight[n,k] * features[b,n,h,w]."""
    if features.data.ndim != 4 or weight.data.ndim != 2:
        raise ValueError("channel_linear: expected [B,N,H,W] features and [N,K] weight")
    if features.shape[1] != weight.shape[0]:
        raise ValueError(
            f"channel_linear: {features.shape[1]} feature channels vs weight rows {weight.shape[0]}")

    out = np.tensordot(features.data, weight.data, axes=([1], [0]))

    def bwd(g):
        _acc(features, np.ascontiguousarray(
            np.tensordot(g, weight.data, axes=([1], [1])).transpose(0, 3, 1, 2)))
        _acc(weight, np.tensordot(features.data, g, axes=([0, 2, 3], [0, 2, 3])))

    return _node(np.ascontiguousarray(out.transpose(0, 3, 1, 2)),
                 (features, weight), "channel_linear", bwd)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-shifted for stability."""
    if logits.data.ndim != 4:
        raise ValueError("softmax_channels: expected rank 4")
    if logits.shape[1] < 2:
        raise ValueError(f"softmax_channels: need at least 2 channels, got {logits.shape[1]}")
    if not np.isfinite(logits.data).all():
        raise ValueError("softmax_channels: non-finite logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        _acc(logits, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _node(s, (logits,), "softmax_channels", bwd)


# ---------------------------------------------------------------------------
# reductions

def reduce(a: Tensor, kind: str, axes=None) -> Tensor:
    """Sum or mean over the named axes (all axes when None)."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"reduce: kind must be 'sum' or 'mean', got {kind!r}")
    ndim = a.data.ndim
    if axes is None:
        axes = tuple(range(ndim))
    else:
        axes = (axes,) if isinstance(axes, int) else tuple(axes)
        if len(set(axes)) != len(axes) or any(ax < 0 or ax >= ndim for ax in axes):
            raise ValueError(f"reduce: invalid axes {axes} for shape {a.shape}")
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes)
    if kind == "mean":
        out = out / count

    def bwd(g):
        expanded = np.expand_dims(g, axes)
        if kind == "mean":
            expanded = expanded / count
        _acc(a, np.broadcast_to(expanded, a.data.shape))

    return _node(out, (a,), f"reduce_{kind}", bwd)


def sum_all(a: Tensor) -> Tensor:
    return reduce(a, "sum")


def mean_all(a: Tensor) -> Tensor:
    return reduce(a, "mean")


# ---------------------------------------------------------------------------
# backward pass and gradient checking

def backward(loss: Tensor) -> None:
    """Populate grads of all reachable gradient-tracking tensors.

    Reverse topological traversal from ``loss``, which must hold a single
    element. Seeds d(loss)/d(loss) = 1.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    state: dict[int, int] = {}  # id -> 0 discovered, 1 finished
    stack = [loss]
    while stack:
        t = stack[-1]
        mark = state.get(id(t))
        if mark is None:
            state[id(t)] = 0
            for p in t.parents:
                if state.get(id(p)) is None:
                    stack.append(p)
        else:
            stack.pop()
            if mark == 0:
                state[id(t)] = 1
                order.append(t)

    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    op_name: str
    max_relative_error: float
    element_count: int
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.op_name:<34s} elems={self.element_count:<6d} "
                f"max_rel_err={self.max_relative_error:.3e}  {status}")


def finite_diff_gradcheck(fn, point: Tensor, step: float = 1e-4,
                          tolerance: float = 1e-5,
                          op_name: str = "fn") -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``fn`` against central
    differences at ``point`` (float64 required).

    Relative error per element is |a - n| / max(1, |a|, |n|); the check
    passes iff the max over elements is <= tolerance.
    """
    if point.data.dtype != np.float64:
        raise ValueError("finite_diff_gradcheck: point must be float64")
    x = Tensor(point.data.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ValueError("finite_diff_gradcheck: fn must produce a scalar")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = point.data.copy().ravel()
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(Tensor(flat.reshape(point.shape))).data)
            flat[i] = orig - step
            lo = float(fn(Tensor(flat.reshape(point.shape))).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)

    if not np.isfinite(numeric).all():
        return GradCheckReport(op_name, float("inf"), flat.size, False)
    a = analytic.ravel()
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    err = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(op_name, err, flat.size, err <= tolerance)
