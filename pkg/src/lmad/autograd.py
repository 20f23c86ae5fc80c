"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy buffers (float32 for training, float64 for gradient
checking).  Operations executed while a :class:`GradTape` is active are
recorded in execution order; :func:`backward` replays the records in reverse
and accumulates gradients into every tensor on the differentiation path.
Forward operations never mutate their inputs, and every operation is
deterministic: identical inputs produce bit-identical outputs within one
build.  With checked mode on, any NaN/Inf in an op output raises
:class:`~lmad.errors.NonFiniteError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import NonFiniteError, ShapeError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)
# Large negative additive bias used for masking attention scores.  After the
# usual max-subtraction inside softmax, exp() of anything this far below the
# row maximum underflows to exactly 0.0, so masked weights are exact zeros.
MASKED_SCORE = -1e9

_checked = False


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf scanning of every op output (off by default)."""
    global _checked
    _checked = bool(flag)


def checked_mode() -> bool:
    return _checked


class Tensor:
    """A dense float array plus an optional gradient buffer.

    ``requires_grad`` marks trainable leaves.  ``grad`` starts as ``None``
    and is filled in (or accumulated into) by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_on_path")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ShapeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._on_path = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis):
        return reduce_max(self, axis=axis)


class GradTape:
    """Records operations for one forward pass; single-use per backward."""

    def __init__(self):
        self._nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._used = False

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._nodes)


_TAPES: list[GradTape] = []


def define_op(inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a computed result and record its backward rule on the active tape.

    ``backward_fn`` receives dL/d(out) and must return one gradient array (or
    None) per input, each matching that input's shape.  This is also the
    extension point used by tests to inject custom rules.
    """
    if _checked and not np.isfinite(out_data).all():
        raise NonFiniteError("operation produced a non-finite value")
    out = Tensor(out_data)
    if _TAPES:
        tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
        if any(t._on_path for t in tensor_inputs):
            out._on_path = True
            _TAPES[-1]._nodes.append((tensor_inputs, out, backward_fn))
    return out


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate dL/dx into ``x.grad`` for every tensor on the tape's path.

    The loss must be scalar and each tape supports exactly one backward pass.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise RuntimeError("this tape has already been used for a backward pass")
    if not any(out is loss for _, out, _ in tape._nodes):
        # A loss built after the context exits looks fine but propagates
        # nothing; fail loudly instead of silently leaving every grad None.
        raise ValueError("loss was not produced while this tape was recording")
    tape._used = True
    loss.grad = np.ones_like(loss.data)
    for inputs, out, backward_fn in reversed(tape._nodes):
        gout = out.grad
        if gout is None:
            continue
        grads = backward_fn(gout)
        for tensor, g in zip(inputs, grads):
            if g is None or not tensor._on_path:
                continue
            if g.shape != tensor.data.shape:
                raise ShapeError(
                    f"backward rule produced gradient of shape {g.shape} "
                    f"for tensor of shape {tensor.data.shape}")
            if _checked and not np.isfinite(g).all():
                raise NonFiniteError("backward produced a non-finite gradient")
            tensor.grad = g if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "add")
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return define_op((a, b), out, back)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "sub")
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return define_op((a, b), out, back)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "mul")
    out = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return define_op((a, b), out, back)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "div")
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return define_op((a, b), out, back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        return (-g,)

    return define_op((a,), -a.data, back)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics on leading axes."""
    if not isinstance(b, Tensor):
        raise ShapeError("matmul expects two tensors")
    _check_dtypes(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return define_op((a, b), out, back)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return define_op((a,), out, back)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.data.shape

    def back(g):
        return (g.reshape(orig),)

    return define_op((a,), out, back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t, "concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return define_op(tuple(tensors), out, back)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows ``table[ids]``; the backward pass scatter-adds."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"gather_rows needs a 1-d integer index, got {ids.dtype} {ids.shape}")
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"gather_rows index out of range for table with {n} rows")
    out = table.data[ids]

    def back(g):
        if table.data.ndim == 2:
            # Flat bincount visits grads in the same row-major order np.add.at
            # would, but runs an order of magnitude faster on large gathers.
            d = table.data.shape[1]
            flat_ids = (ids[:, None] * d + np.arange(d)).ravel()
            gt = np.bincount(flat_ids, weights=g.ravel(),
                             minlength=table.data.size).reshape(table.data.shape)
            return (gt.astype(table.data.dtype, copy=False),)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return define_op((table,), out, back)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return define_op((a,), np.asarray(out), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).astype(a.dtype, copy=False).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return define_op((a,), np.asarray(out), back)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient routes to the first maximal entry."""
    out = a.data.max(axis=axis)
    idx = np.argmax(a.data, axis=axis)

    def back(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return define_op((a,), out, back)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def back(g):
        return (g * (a.data > 0),)

    return define_op((a,), out, back)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    e = _erf(a.data * _INV_SQRT2)
    out = 0.5 * a.data * (1.0 + e)

    def back(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (0.5 * (1.0 + e) + a.data * pdf),)

    return define_op((a,), out.astype(a.dtype, copy=False), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return define_op((a,), out, back)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def back(g):
        return (g / a.data,)

    return define_op((a,), out, back)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        return (g * (0.5 / out),)

    return define_op((a,), out, back)


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if a.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return define_op((a,), out, back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return define_op((a,), out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        flat_g = g.reshape(-1, d)
        dgain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        gh = g * gain.data
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return define_op((x, gain, bias), out, back)


class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    __slots__ = ("mean", "var")

    def __init__(self, dim: int, dtype=np.float32):
        self.mean = np.zeros(dim, dtype=dtype)
        self.var = np.ones(dim, dtype=dtype)

    def copy(self) -> "BatchNormState":
        clone = BatchNormState.__new__(BatchNormState)
        clone.mean = self.mean.copy()
        clone.var = self.var.copy()
        return clone


def batch_norm_1d(x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState,
                  training: bool, momentum: float = 0.1, eps: float = 1e-5,
                  update_running: bool | None = None) -> Tensor:
    """Batch normalization over axis 0 of an (N, d) tensor.

    Training mode normalizes with biased batch statistics and (unless
    ``update_running`` is False) folds them into the running buffers; eval
    mode applies the running statistics as a fixed per-row affine map.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm_1d expects (N, d) input, got {x.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"batch_norm_1d affine shapes {gain.shape}/{bias.shape} do not match ({d},)")
    if training:
        if x.data.shape[0] < 2:
            raise ShapeError("batch_norm_1d training mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_running is None or update_running:
            state.mean = ((1.0 - momentum) * state.mean + momentum * mu).astype(state.mean.dtype)
            state.var = ((1.0 - momentum) * state.var + momentum * var).astype(state.var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gain.data + bias.data

        def back(g):
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
            return dx, dgain, dbias

        return define_op((x, gain, bias), out, back)

    inv = 1.0 / np.sqrt(state.var + eps)
    xhat = (x.data - state.mean) * inv
    out = xhat * gain.data + bias.data

    def back(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        return g * (gain.data * inv), dgain, dbias

    return define_op((x, gain, bias), out, back)
