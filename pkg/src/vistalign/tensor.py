"""Small reverse-mode autodiff over float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to one gradient per
parent. :func:`backward` replays those closures in reverse creation order.

Broadcasting is deliberately limited: elementwise ops take equal shapes or a
Python scalar. Only :func:`add_bias` and :func:`repeat_axis` expand an operand
over extra axes, and they do so explicitly.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "ParameterError",
    "tensor",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "repeat_axis",
    "slice_axis",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "embedding_gather",
    "pick",
    "tsum",
    "mean",
    "squared_l2",
    "cosine_sim",
    "backward",
    "zero_grad",
    "grad_check",
    "grad_check_params",
]


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ParameterError(ValueError):
    """A hyperparameter of an operation is out of its valid range."""


_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        # creation order doubles as execution order of the graph
        self._id = next(_ids)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str,
            moves_only: bool = False) -> Tensor:
    # pure data movement cannot create non-finite values from checked op outputs
    if not (moves_only and all(p.op for p in parents)) and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), grad_fn, op)
    return Tensor(data, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing ``b.ndim`` extents of ``x``."""
    k = b.ndim
    if k > x.ndim or x.shape[x.ndim - k:] != b.shape:
        raise DimensionError(f"add_bias: {b.shape} is not a trailing block of {x.shape}")
    lead = tuple(range(x.ndim - k))

    def grad_fn(g):
        return g, g.sum(axis=lead) if lead else g

    return _result(x.data + b.data, (x, b), grad_fn, "add_bias")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def grad_fn(g):
        # d/dx = 0.5(1+th) + 0.5 x (1-th^2) c (1 + 3a x^2)
        d = 1.0 - th * th
        d *= xd
        d *= (3 * 0.044715 * c) * x2 + c
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _result(out, (x,), grad_fn, "gelu")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across the leading axes of ``a`` or
    has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading extents {a.shape[:-2]} and {b.shape[:-2]} differ")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose", moves_only=True)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape", moves_only=True)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat: {t.shape} incompatible with {xs[0].shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, grad_fn, "concat", moves_only=True)


def repeat_axis(x: Tensor, axis: int, count: int) -> Tensor:
    """Insert a new axis at ``axis`` holding ``count`` copies of ``x``."""
    if count < 1:
        raise DimensionError("repeat count must be >= 1")
    axis = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, axis), count, axis=axis)
    return _result(out, (x,), lambda g: (g.sum(axis=axis),), "repeat", moves_only=True)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise IndexError(f"slice [{start}:{stop}] out of range for extent {x.shape[axis]}")
    idx = (slice(None),) * axis + (slice(start, stop),)

    def grad_fn(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return _result(x.data[idx], (x,), grad_fn, "slice", moves_only=True)


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")
    axis = axis % x.ndim
    return _result(
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        "sum",
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get 0."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), grad_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        dy = g * gain.data
        dx = inv * (
            dy - dy.mean(axis=-1, keepdims=True) - xhat * (dy * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), grad_fn, "layer_norm")


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("ids must be integers")
    ids = ids.astype(np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range [0, {v})")

    def grad_fn(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), grad_fn, "gather")


def pick(x: Tensor, idx) -> Tensor:
    """``out[...] = x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"pick: index shape {idx.shape} vs {x.shape[:-1]}")
    v = x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"pick index out of range [0, {v})")
    expanded = idx[..., None]

    def grad_fn(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, expanded, g[..., None], axis=-1)
        return (gx,)

    return _result(np.take_along_axis(x.data, expanded, axis=-1)[..., 0], (x,), grad_fn, "pick")


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def squared_l2(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance along the last axis."""
    _same_shape(a, b, "squared_l2")
    diff = a.data - b.data

    def grad_fn(g):
        ga = 2.0 * diff * np.expand_dims(g, -1)
        return ga, -ga

    return _result((diff * diff).sum(axis=-1), (a, b), grad_fn, "squared_l2")


def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis, norms floored at ``eps``."""
    _same_shape(a, b, "cosine_sim")
    if eps <= 0:
        raise ParameterError("cosine_sim eps must be positive")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    da = np.maximum(na, eps)
    db = np.maximum(nb, eps)
    c = (ad * bd).sum(axis=-1) / (da * db)

    def grad_fn(g):
        # max(norm, eps) has zero derivative below the floor
        ka = np.where(na > eps, c / np.where(na > eps, na * na, 1.0), 0.0)
        kb = np.where(nb > eps, c / np.where(nb > eps, nb * nb, 1.0), 0.0)
        inv = (1.0 / (da * db))[..., None]
        ge = g[..., None]
        return ge * (bd * inv - ad * ka[..., None]), ge * (ad * inv - bd * kb[..., None])

    return _result(c, (a, b), grad_fn, "cosine_sim")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    for node in _reachable(loss):
        g = upstream.pop(node._id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._id in upstream:
                upstream[parent._id] = upstream[parent._id] + pg
            else:
                upstream[parent._id] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of ``fn`` at ``x``."""
    return grad_check_params(lambda: fn(x), [x], h)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Like :func:`grad_check` but perturbs every coordinate of every tensor in ``params``.

    ``loss_fn`` takes no arguments and must rebuild the graph from the current
    contents of ``params``.
    """
    return grad_check_many(lambda: [loss_fn()], params, h)[0]


def grad_check_many(losses_fn: Callable[[], Sequence[Tensor]], params: Sequence[Tensor],
                    h: float = 1e-5) -> list[float]:
    """Check several scalar losses that share one forward computation.

    ``losses_fn`` returns a list of scalar tensors; each perturbation runs it
    once, so checking k losses costs one finite-difference sweep instead of k.
    Returns the max relative error per loss.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ParameterError(f"step h={h} outside [1e-7, 1e-3]")
    params = list(params)
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
    try:
        losses = list(losses_fn())
        again = losses_fn()
        if [v.data.tobytes() for v in losses] != [v.data.tobytes() for v in again]:
            raise ContractError("loss function is not deterministic")
        analytics = []
        for loss in losses:
            for p in params:
                p.grad = None
            backward(loss)
            analytics.append([np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params])
        # numeric probes need no graph
        for p in params:
            p.requires_grad = False
        worst = [0.0] * len(losses)
        for j, p in enumerate(params):
            numeric = np.empty((len(losses), p.size))
            flat = p.data.reshape(-1)
            for i in range(p.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = [v.item() for v in losses_fn()]
                flat[i] = orig - h
                fm = [v.item() for v in losses_fn()]
                flat[i] = orig
                numeric[:, i] = (np.array(fp) - np.array(fm)) / (2.0 * h)
            for k in range(len(losses)):
                worst[k] = max(worst[k], _rel_err(analytics[k][j].reshape(-1), numeric[k]))
        return worst
    finally:
        for p, (rg, g) in zip(params, saved):
            p.requires_grad = rg
            p.grad = g
