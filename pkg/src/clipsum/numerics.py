"""Dense tensors, reverse-mode differentiation, and the Adam optimizer step.

The op set is deliberately closed: matmul, add, mul, scale, reduce_sum,
softmax, layer_norm, embedding, concat, slice_axis, transpose, gelu and
cross_entropy.  Everything the model needs is composed from these.  Each op
checks its output for NaN/Inf and aborts naming the offending op, so a
numeric failure is caught where it happens instead of surfacing as a garbage
loss ten layers later.

Recording works like TF eager: ops executed inside a ``with GradientTape()``
block are appended to that tape whenever an input requires gradients, and
``tape.gradients(loss, params)`` replays the records in reverse.  Tensors are
treated as immutable once produced by an op; only the optimizer mutates
parameter storage, and never inside an active tape.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericError(RuntimeError):
    """Non-finite value or other hard numeric failure."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class Tensor:
    """A dense array plus gradient-tracking metadata.

    ``data`` is always a C-contiguous float32 or float64 ndarray.  Tensors
    produced by ops must not be mutated afterwards; read-only sharing across
    threads is safe.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def parameter(data, name: str, dtype=None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, name: str | None = None, dtype=None) -> Tensor:
    """A leaf tensor that never receives gradients (e.g. frozen features)."""
    return Tensor(data, requires_grad=False, name=name, dtype=dtype)


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["GradientTape"] = []


class GradientTape:
    """Ordered record of executed ops for one forward pass.

    Tapes nest but are never shared across threads.  A tape is single-use:
    ``gradients`` consumes it.
    """

    def __init__(self):
        self._entries: list[tuple[str, Tensor, tuple[Tensor, ...], object]] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.remove(self)

    def _record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._entries.append((op, out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._entries)

    def gradients(self, loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
        """Accumulate dL/dp for every tensor in ``params``.

        Parameters that did not participate in the forward pass get a zero
        gradient.  The tape is consumed afterwards.
        """
        if self._consumed:
            raise NumericError("gradient tape already consumed")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        recorded_outputs = {id(out) for _, out, _, _ in self._entries}
        if id(loss) not in recorded_outputs:
            raise NumericError("loss is detached from this tape")

        grad_map: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for op, out, inputs, backward_fn in reversed(self._entries):
            g_out = grad_map.pop(id(out), None)
            if g_out is None:
                continue  # not on any path to the loss
            in_grads = backward_fn(g_out)
            for inp, g_in in zip(inputs, in_grads):
                if g_in is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(g_in)):
                    raise NumericError(f"non-finite gradient produced by op '{op}'")
                acc = grad_map.get(id(inp))
                if acc is None:
                    grad_map[id(inp)] = g_in
                else:
                    acc += g_in

        result = {}
        for p in params:
            result[p] = grad_map.get(id(p), np.zeros_like(p.data))
        self._entries.clear()
        self._consumed = True
        return result


def backward(tape: GradientTape, loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Functional alias for ``tape.gradients``."""
    return tape.gradients(loss, params)


def _active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _emit("scale", out, (a,), bwd)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = a.data.sum()

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _emit("reduce_sum", np.asarray(out), (a,), bwd)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` is a boolean array broadcastable to ``x.shape``; False entries
    are excluded (zero probability).  Every slice must keep at least one
    entry.  The axis-wise maximum is subtracted before exponentiation.
    """
    z = x.data
    ax = axis if axis >= 0 else z.ndim + axis
    if not 0 <= ax < z.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not keep.any(axis=ax).all():
            raise NumericError("softmax: a slice has every entry masked")
        z = np.where(keep, z, -np.inf)
    m = z.max(axis=ax, keepdims=True)
    e = np.exp(z - m)
    out = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        s = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - s),)

    return _emit("softmax", out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last extent {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * y).sum(axis=lead) if lead else g * y
        dbias = g.sum(axis=lead) if lead else g.copy()
        dy = g * gain.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                    - y * (dy * y).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _emit("layer_norm", out, (x, gain, bias), bwd)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table`` by integer id."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}) in lookup")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("embedding", out, (table,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``."""
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop)`` along one axis."""
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"slice_axis: axis {axis} invalid for shape {x.shape}")
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(
            f"slice_axis: range [{start}, {stop}) invalid for extent {x.shape[ax]}")
    sl = tuple(slice(start, stop) if i == ax else slice(None) for i in range(x.data.ndim))
    out = x.data[sl]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _emit("slice_axis", out, (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    """Rank-2 transpose."""
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank-2, got shape {x.shape}")
    out = x.data.T

    def bwd(g):
        return (g.T,)

    return _emit("transpose", out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", out, (x,), bwd)


def cross_entropy(logits: Tensor, targets: Sequence[int],
                  mask: np.ndarray | None = None,
                  reduction: str = "mean") -> Tensor:
    """Token-level negative log-likelihood over the included positions.

    ``logits`` is L x V, ``targets`` length L.  ``mask`` (boolean, length L)
    selects the positions that count; pad positions are excluded from both
    the sum and the divisor.  Raises if nothing is included.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or tgt.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target id out of range")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    keep = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target position is excluded (all-pad target)")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    logp = (z - m) - np.log(denom)
    picked = logp[np.arange(tgt.size), tgt]
    total = -(picked * keep).sum()
    out = total / count if reduction == "mean" else total

    def bwd(g):
        dz = probs.copy()
        dz[np.arange(tgt.size), tgt] -= 1.0
        dz *= keep[:, None]
        if reduction == "mean":
            dz /= count
        return (dz * g,)

    return _emit("cross_entropy", np.asarray(out), (logits,), bwd)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-ndarray log-softmax for inference paths (no tape)."""
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return (z - m) - np.log(e.sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment estimates plus the global step counter.

    The counter advances once per optimizer step, not per micro-batch.
    """

    def __init__(self, params: Mapping[str, Tensor]):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step = 0

    @classmethod
    def restore(cls, m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int) -> "AdamState":
        state = cls({})
        state.m = m
        state.v = v
        state.step = step
        return state


def adam_step(params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray],
              state: AdamState,
              lr: float | Mapping[str, float],
              beta1: float = 0.9,
              beta2: float = 0.999,
              eps: float = 1e-8,
              weight_decay: float = 1e-5) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Decay is applied as ``p -= lr * wd * p`` before the moment update, so it
    never contaminates the moment estimates.  ``lr`` may be a scalar or a
    per-parameter-name mapping (for parameter groups).
    """
    state.step += 1
    t = state.step
    b1c = 1.0 - beta1 ** t
    b2c = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != parameter '{name}' shape {p.data.shape}")
        lr_p = lr[name] if isinstance(lr, Mapping) else lr
        if lr_p <= 0:
            raise ValueError(f"adam_step: learning rate for '{name}' must be > 0")
        if weight_decay:
            p.data -= lr_p * weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr_p * (m / b1c) / (np.sqrt(v / b2c) + eps)
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"adam_step: parameter '{name}' became non-finite")
