"""Minimal reverse-mode autodiff over dense float64 tensors.

Every operation the encoder-decoder forward/backward needs, and nothing
more: no broadcasting beyond bias/mask patterns, no mixed precision, no
graph rewriting. Ops record onto the active :class:`Tape`; calling
:func:`backward` on a scalar loss fills ``tape.grads`` for every
``requires_grad`` ancestor, accumulating when a tensor feeds several
consumers.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf validation after every op (off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """Dense float64 value. Treated as immutable once created.

    ``data`` is a C-ordered ndarray; ``requires_grad`` marks leaves the
    backward pass should produce gradients for.
    """

    __slots__ = ("data", "requires_grad", "store_name", "store_key")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.requires_grad = requires_grad
        # Set by materialize() on parameter views; None otherwise.
        self.store_name = None
        self.store_key = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Internal fast path: wrap an op result without copying.

        Finiteness is only validated in debug mode; construction through
        the public initializer always validates.
        """
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.store_name = None
        t.store_key = None
        if _DEBUG_CHECKS and not np.isfinite(arr).all():
            raise FloatingPointError("non-finite value produced by an op")
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded op: output identity, inputs, and a vjp callback."""

    __slots__ = ("out_id", "inputs", "vjp")

    def __init__(self, out_id: int, inputs: tuple, vjp: Callable):
        self.out_id = out_id
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Recording of ops in execution (topological) order.

    One tape per training worker; not thread safe. After
    :func:`backward`, ``grads`` maps ``id(tensor)`` to the gradient
    ndarray for exactly the ``requires_grad`` tensors reachable from the
    loss.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def grad(self, t: Tensor):
        return self.grads.get(id(t))


_tape_stack: list[Tape] = []


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
    if not _tape_stack:
        return
    if not any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        return
    _tape_stack[-1].nodes.append(_Node(id(out), tuple(inputs), vjp))


def _needs_grad(*tensors) -> bool:
    return bool(_tape_stack) and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; fills and returns ``tape.grads``."""
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = tape.grads
    grads[id(loss)] = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        gout = grads.get(node.out_id)
        if gout is None:
            continue
        gins = node.vjp(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            if prev is None:
                grads[key] = g
            else:
                prev += g
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise and structural ops -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data, a.requires_grad or b.requires_grad)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    _record(out, (a, b), vjp)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data, a.requires_grad or b.requires_grad)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    _record(out, (a, b), vjp)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor._wrap(a.data * s, a.requires_grad)
    _record(out, (a,), lambda g: (g * s,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes.

    Supported: 2-d @ 2-d, n-d @ 2-d (stacked rows through one weight
    matrix), and n-d @ n-d with identical batch dims (per-head
    attention products).
    """
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = Tensor._wrap(ad @ bd, a.requires_grad or b.requires_grad)

    if bd.ndim == 2:

        def vjp(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k = ad.shape[-1]
                n = g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return (ga, gb)

    else:

        def vjp(g):
            ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
            gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
            return (ga, gb)

    _record(out, (a, b), vjp)
    return out


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._wrap(a.data.transpose(axes), a.requires_grad)
    _record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src_shape = a.data.shape
    out = Tensor._wrap(np.ascontiguousarray(a.data).reshape(shape), a.requires_grad)
    _record(out, (a,), lambda g: (g.reshape(src_shape),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    datas = [t.data for t in tensors]
    out = Tensor._wrap(
        np.concatenate(datas, axis=axis), any(t.requires_grad for t in tensors)
    )
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[bounds[i] : bounds[i + 1]], 0, axis)
            for i in range(len(datas))
        )

    _record(out, tuple(tensors), vjp)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = Tensor._wrap(a.data[key], a.requires_grad)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    _record(out, (a,), vjp)
    return out


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    n_rows = table.shape[0]
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= n_rows):
        raise IndexError("gather_rows: id out of range")
    out = Tensor._wrap(table.data[ids], table.requires_grad)

    def vjp(g):
        flat_ids = ids.ravel()
        g2 = g.reshape(-1, table.shape[1])
        if n_rows * flat_ids.size <= 4_000_000:
            # scatter as a GEMM against a one-hot selector: much faster
            # than ufunc.at for small tables, and equally deterministic
            sel = np.zeros((n_rows, flat_ids.size))
            sel[flat_ids, np.arange(flat_ids.size)] = 1.0
            return (sel @ g2,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat_ids, g2)
        return (gt,)

    _record(out, (table,), vjp)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum()), a.requires_grad)
    shape = a.data.shape
    _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


# --- nonlinearities -------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0.0), a.requires_grad)
    _record(out, (a,), lambda g: (g * (a.data > 0.0),))
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units divided by 1-rate; identity at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = rng.random(a.data.shape) >= rate
    factor = keep / (1.0 - rate)
    out = Tensor._wrap(a.data * factor, a.requires_grad)
    _record(out, (a,), lambda g: (g * factor,))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y, a.requires_grad)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    _record(out, (a,), vjp)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(
        xhat * gain.data + bias.data,
        x.requires_grad or gain.requires_grad or bias.requires_grad,
    )

    def vjp(g):
        gx = None
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gy - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes) if gain.requires_grad else None
        gbias = g.sum(axis=axes) if bias.requires_grad else None
        return (gx, ggain, gbias)

    _record(out, (x, gain, bias), vjp)
    return out


# --- loss -----------------------------------------------------------------


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log-softmax on a plain array (no autodiff)."""
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(
    logits: Tensor, target_dist, pad_mask=None, *, normalize_tol: float = 1e-6
) -> Tensor:
    """Mean over non-pad positions of -sum(target * log_softmax(logits)).

    ``target_dist`` rows must each sum to 1 (hard one-hot, smoothed, or a
    soft teacher distribution); it is treated as a constant, so no
    gradient flows into a teacher. ``pad_mask`` is boolean with True at
    real positions; None means all positions count.
    """
    t = target_dist.data if isinstance(target_dist, Tensor) else np.asarray(target_dist)
    z = logits.data
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {z.shape}")
    if pad_mask is None:
        mask = np.ones(z.shape[:-1], dtype=bool)
    else:
        mask = np.asarray(pad_mask, dtype=bool)
        if mask.shape != z.shape[:-1]:
            raise ValueError(f"pad_mask shape {mask.shape} != {z.shape[:-1]}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: no non-pad positions")
    row_sums = t[mask].sum(axis=-1)
    if np.abs(row_sums - 1.0).max(initial=0.0) > normalize_tol:
        raise ValueError("cross_entropy: target rows must sum to 1")

    ls = log_softmax_np(z)
    per_pos = -(t * ls).sum(axis=-1)
    loss = per_pos[mask].sum() / n
    out = Tensor._wrap(np.asarray(loss), logits.requires_grad)

    def vjp(g):
        p = np.exp(ls)
        gz = (p - t) * (mask[..., None] / n)
        return (g * gz,)

    _record(out, (logits,), vjp)
    return out
