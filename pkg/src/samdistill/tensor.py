"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node holding its parents and a backward rule that
maps the output gradient to one gradient per parent.  ``backward`` orders the
reachable nodes topologically (the :class:`Tape`) and visits each once.

Elementwise arithmetic (add, sub, mul, div, where) follows numpy broadcasting
and reduces gradients back to the operand shape; every other op requires
exactly matching shapes.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from math import prod
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "abs",
    "relu",
    "sigmoid",
    "softplus",
    "where",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "embedding",
    "softmax",
    "log_softmax",
    "max_reduce",
    "cosine_similarity",
    "cosine_matrix",
    "margin_hinge",
    "layer_norm",
    "conv",
    "upsample_nearest",
    "interp_linear_axis",
    "upsample_linear",
    "cross_entropy_with_logits",
    "binary_cross_entropy_with_logits",
    "DIFFERENTIABLE_OPS",
]

COSINE_EPS = 1e-8

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus its place in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} contains NaN or Inf".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced NaN or Inf")
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "detach"
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar --------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# -- tape ------------------------------------------------------------------


class Tape:
    """Topologically ordered nodes reachable from a root tensor.

    Every node appears after all of its parents.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> Tape:
    """Accumulate d(loss)/d(node) into ``.grad`` of every tracked node."""
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != loss.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != loss shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not recorded on the tape (no input requires grad)")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is not None:
            node.grad = node.grad + g
        else:
            # leaves get a private copy; interior grads are never mutated in place
            node.grad = g.copy() if node._backward is None else g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise AssertionError(f"{node.op}: grad shape {pg.shape} vs parent {parent.shape}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return tape


# -- elementwise -----------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return Tensor._from_op(x**p, (a,), lambda g: (g * p * x ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return Tensor._from_op(out, (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    x = a.data
    return Tensor._from_op(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _stable_sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return Tensor._from_op(out, (a,), lambda g: (g * _stable_sigmoid(x),), "softplus")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; ``mask`` is constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(m, g, 0.0), sa), _unbroadcast(np.where(m, 0.0, g), sb)),
        "where",
    )


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(out, (a, b), bw, "matmul")


# -- reductions and shape --------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = prod(a.shape[ax] for ax in axes)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return Tensor._from_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise DimensionError(f"concat shapes incompatible along axis {axis}: {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with a constant integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)

    return Tensor._from_op(np.take(a.data, idx, axis=ax), (a,), bw, "take")


def embedding(weight, indices) -> Tensor:
    """Row lookup ``weight[indices]`` for a (num, dim) table."""
    weight = _as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {weight.shape}")
    return take(weight, indices, axis=0)


# -- softmax family --------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axes(axis, a.ndim)[0]
    x = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axes(axis, a.ndim)[0]
    x = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=ax, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return Tensor._from_op(out, (a,), bw, "log_softmax")


def max_reduce(a, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Maximum and argmax along ``axis``; ties go to the lowest index.

    The gradient flows only to the selected position.
    """
    a = _as_tensor(a)
    ax = _norm_axes(axis, a.ndim)[0]
    if a.shape[ax] < 1:
        raise DimensionError("max_reduce over an empty axis")
    idx = np.argmax(a.data, axis=ax)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)

    return Tensor._from_op(vals, (a,), bw, "max_reduce"), idx


# -- similarity ------------------------------------------------------------


def cosine_similarity(a, b, eps: float = COSINE_EPS) -> Tensor:
    """``a.b / (|a||b| + eps)`` over the last axis; zero vectors give 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(-1)
    na = np.sqrt((ad * ad).sum(-1))
    nb = np.sqrt((bd * bd).sum(-1))
    den = na * nb + eps
    out = dot / den

    def bw(g):
        g = g[..., None]
        d = den[..., None]
        o = out[..., None]
        # d|a|/da = a/|a|, guarded where |a| == 0
        ua = np.divide(ad, na[..., None], out=np.zeros_like(ad), where=na[..., None] > 0)
        ub = np.divide(bd, nb[..., None], out=np.zeros_like(bd), where=nb[..., None] > 0)
        ga = g * (bd / d - o * nb[..., None] * ua / d)
        gb = g * (ad / d - o * na[..., None] * ub / d)
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "cosine_similarity")


def cosine_matrix(a, b, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarities: (..., N, C) x (..., M, C) -> (..., N, M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_matrix channel mismatch: {a.shape} vs {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    n, m = a.shape[-2], b.shape[-2]
    ad = np.broadcast_to(a.data, lead + a.shape[-2:]).reshape((-1,) + a.shape[-2:])
    bd = np.broadcast_to(b.data, lead + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
    na = np.sqrt((ad * ad).sum(-1))
    nb = np.sqrt((bd * bd).sum(-1))
    out = np.empty((len(ad), n, m))
    # one leading item at a time keeps the N x M temporaries in cache
    for i in range(len(ad)):
        np.matmul(ad[i], bd[i].T, out=out[i])
        den = np.multiply.outer(na[i], nb[i])
        den += eps
        out[i] /= den

    def bw(g):
        g = np.broadcast_to(g, lead + (n, m)).reshape(out.shape)
        ua = np.divide(ad, na[..., None], out=np.zeros_like(ad), where=na[..., None] > 0)
        ub = np.divide(bd, nb[..., None], out=np.zeros_like(bd), where=nb[..., None] > 0)
        ga, gb = np.empty_like(ad), np.empty_like(bd)
        for i in range(len(ad)):
            den = np.multiply.outer(na[i], nb[i])
            den += eps
            gd = g[i] / den  # d out / d dot
            gden = gd * out[i]  # minus d out / d den
            ga[i] = gd @ bd[i] - (gden @ nb[i])[:, None] * ua[i]
            gb[i] = gd.T @ ad[i] - (gden.T @ na[i])[:, None] * ub[i]
        ga = ga.reshape(lead + a.shape[-2:])
        gb = gb.reshape(lead + b.shape[-2:])
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out.reshape(lead + (n, m)), (a, b), bw, "cosine_matrix")


def margin_hinge(sim, mask, margin: float) -> Tensor:
    """Mean over anchors of ``sum_k mask * max(0, margin - sim[pos] + sim[k])``.

    ``sim`` is (..., N, M) with anchors on axis -2; the positive of each anchor
    is its first argmax along the last axis.  Equivalent to gathering the
    positive, subtracting, relu, masking and averaging, fused into one node.
    """
    sim = _as_tensor(sim)
    s = sim.data
    m = np.asarray(mask, dtype=bool)
    if m.shape != s.shape:
        raise DimensionError(f"mask shape {m.shape} != similarity shape {s.shape}")
    pos_idx = np.argmax(s, axis=-1)[..., None]
    h = s - np.take_along_axis(s, pos_idx, axis=-1) + margin
    active = (h > 0) & m
    anchors = s.size // s.shape[-1]
    out = np.where(active, h, 0.0).sum(-1).mean()

    def bw(g):
        scale = g / anchors
        gs = active * scale
        np.put_along_axis(gs, pos_idx, np.take_along_axis(gs, pos_idx, axis=-1) - gs.sum(-1, keepdims=True), axis=-1)
        return (gs,)

    return Tensor._from_op(np.asarray(out), (sim,), bw, "margin_hinge")


# -- normalization ---------------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(-1, keepdims=True) - xhat * (gx_hat * xhat).mean(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(lead), g.sum(lead)

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


# -- convolution -----------------------------------------------------------


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise DimensionError(f"expected {n} values, got {v}")
    return v


def conv(x, w, b=None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation (N = 1, 2, 3) with zero padding.

    x: (B, Cin, *S), w: (Cout, Cin, *K), b: (Cout,) or None -> (B, Cout, *S').
    """
    x, w = _as_tensor(x), _as_tensor(w)
    nd = w.ndim - 2
    if nd < 1 or x.ndim != nd + 2:
        raise DimensionError(f"conv rank mismatch: input {x.shape}, weight {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv channel mismatch: input {x.shape}, weight {w.shape}")
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    ksize = w.shape[2:]
    bsz, cin = x.shape[:2]
    cout = w.shape[0]
    if all(k == 1 for k in ksize) and all(p == 0 for p in padding):
        return _pointwise_conv(x, w, b, stride)
    xl = np.moveaxis(x.data, 1, -1)  # channels last
    xp = np.pad(xl, ((0, 0),) + tuple((p, p) for p in padding) + ((0, 0),))
    sp = xp.shape[1:-1]
    if any(s < k for s, k in zip(sp, ksize)):
        raise DimensionError(f"conv kernel {ksize} larger than padded input {sp}")
    if all(st == 1 for st in stride):
        return _shifted_conv(x, w, b, xp, padding)
    out_sz = tuple((s - k) // st + 1 for s, k, st in zip(sp, ksize, stride))
    lead = tuple(range(nd + 1))
    offsets = list(itertools.product(*(range(k) for k in ksize)))
    # one (Cin, Cout) matmul per kernel offset on a strided view; avoids im2col
    wt = np.ascontiguousarray(np.moveaxis(w.data, (0, 1), (-1, -2)))  # (*K, Cin, Cout)

    def window(off):
        return (slice(None),) + tuple(
            slice(o, o + st * (n - 1) + 1, st) for o, st, n in zip(off, stride, out_sz)
        )

    y = np.zeros((bsz,) + out_sz + (cout,))
    for off in offsets:
        y += xp[window(off)] @ wt[off]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv bias must be ({cout},), got {b.shape}")
        y += b.data
    y = np.moveaxis(y, -1, 1)

    def bw(g):
        gl = np.moveaxis(g, 1, -1)
        gwt = np.empty(wt.shape)
        for off in offsets:
            gwt[off] = np.tensordot(xp[window(off)], gl, axes=(lead, lead))
        gw = np.moveaxis(gwt, (-1, -2), (0, 1))
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for off in offsets:
                gxp[window(off)] += gl @ wt[off].T
            inner = gxp[(slice(None),) + tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))]
            gx = np.moveaxis(inner, -1, 1)
        grads = [gx, gw]
        if b is not None:
            grads.append(gl.sum(lead))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(y, parents, bw, "conv")


def _shifted_conv(x: Tensor, w: Tensor, b, xp: np.ndarray, padding) -> Tensor:
    """Stride-1 convolution on the flattened padded input.

    Every kernel offset is a constant row shift of the (B * prod(padded), Cin)
    matrix, so each term is one contiguous matmul.  Rows whose window runs past
    an edge are computed and then cropped.
    """
    ksize = w.shape[2:]
    bsz, cin = x.shape[:2]
    cout = w.shape[0]
    sp = xp.shape[1:-1]
    out_sz = tuple(s - k + 1 for s, k in zip(sp, ksize))
    row_strides = [prod(sp[d + 1:]) for d in range(len(sp))]
    shifts = [(off, int(np.dot(off, row_strides)))
              for off in itertools.product(*(range(k) for k in ksize))]
    total = xp.shape[0] * prod(sp)
    rows = total - shifts[-1][1]
    xf = xp.reshape(total, cin)
    wt = np.ascontiguousarray(np.moveaxis(w.data, (0, 1), (-1, -2)))  # (*K, Cin, Cout)
    yf = np.zeros((total, cout))
    for off, sh in shifts:
        yf[:rows] += xf[sh:sh + rows] @ wt[off]
    crop = (slice(None),) + tuple(slice(0, n) for n in out_sz)
    y = yf.reshape((bsz,) + sp + (cout,))[crop]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv bias must be ({cout},), got {b.shape}")
        y = y + b.data
    y = np.moveaxis(y, -1, 1)

    def bw(g):
        gfull = np.zeros((bsz,) + sp + (cout,))
        gfull[crop] = np.moveaxis(g, 1, -1)
        gf = gfull.reshape(total, cout)
        gwt = np.empty(wt.shape)
        for off, sh in shifts:
            gwt[off] = xf[sh:sh + rows].T @ gf[:rows]
        grads = [None, np.moveaxis(gwt, (-1, -2), (0, 1))]
        if x.requires_grad:
            gxf = np.zeros((total, cin))
            for off, sh in shifts:
                gxf[sh:sh + rows] += gf[:rows] @ wt[off].T
            gxp = gxf.reshape(xp.shape)
            inner = gxp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))]
            grads[0] = np.moveaxis(inner, -1, 1)
        if b is not None:
            grads.append(gf.sum(0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(y, parents, bw, "conv")


def _pointwise_conv(x: Tensor, w: Tensor, b, stride) -> Tensor:
    """1x1 convolution as a channel matmul."""
    xs = x.data[(slice(None), slice(None)) + tuple(slice(None, None, st) for st in stride)]
    bsz, cin = xs.shape[:2]
    out_sz = xs.shape[2:]
    cout = w.shape[0]
    cols = np.moveaxis(xs, 1, -1).reshape(-1, cin)
    wf = w.data.reshape(cout, cin)
    y = cols @ wf.T
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv bias must be ({cout},), got {b.shape}")
        y = y + b.data
    y = np.moveaxis(y.reshape((bsz,) + out_sz + (cout,)), -1, 1)

    def bw(g):
        gf = np.moveaxis(g, 1, -1).reshape(-1, cout)
        gw = (gf.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gs = np.moveaxis((gf @ wf).reshape((bsz,) + out_sz + (cin,)), -1, 1)
            if any(st != 1 for st in stride):
                gx = np.zeros(x.shape)
                gx[(slice(None), slice(None)) + tuple(slice(None, None, st) for st in stride)] = gs
            else:
                gx = gs
        grads = [gx, gw]
        if b is not None:
            grads.append(gf.sum(0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(y, parents, bw, "conv")


# -- resampling ------------------------------------------------------------


def upsample_nearest(x, factors) -> Tensor:
    """Repeat each spatial cell (axes 2..) by integer ``factors``."""
    x = _as_tensor(x)
    nd = x.ndim - 2
    factors = _tuple(factors, nd)
    out = x.data
    for i, f in enumerate(factors):
        out = np.repeat(out, f, axis=2 + i)
    shape = x.shape

    def bw(g):
        new_shape = list(shape[:2])
        for n, f in zip(shape[2:], factors):
            new_shape += [n, f]
        g = g.reshape(new_shape)
        return (g.sum(axis=tuple(3 + 2 * i for i in range(nd))),)

    return Tensor._from_op(out, (x,), bw, "upsample_nearest")


def linear_interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation weights."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def interp_linear_axis(x, axis: int, n_out: int) -> Tensor:
    """Linear resampling of one axis to length ``n_out``."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    m = linear_interp_matrix(x.shape[ax], n_out)
    out = np.moveaxis(np.tensordot(m, x.data, axes=([1], [ax])), 0, ax)

    def bw(g):
        return (np.moveaxis(np.tensordot(m.T, g, axes=([1], [ax])), 0, ax),)

    return Tensor._from_op(out, (x,), bw, "interp_linear_axis")


def upsample_linear(x, size) -> Tensor:
    """Bilinear (2 spatial axes) or trilinear (3 axes) resize to ``size``."""
    x = _as_tensor(x)
    size = _tuple(size, x.ndim - 2)
    for i, n in enumerate(size):
        if x.shape[2 + i] != n:
            x = interp_linear_axis(x, 2 + i, n)
    return x


# -- classification losses -------------------------------------------------


def cross_entropy_with_logits(logits, target, axis: int = 1) -> Tensor:
    """Mean over positions of ``-sum_c target_c * log softmax(logits)_c``.

    ``target`` is a constant probability array of the same shape.
    """
    logits = _as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"target shape {t.shape} != logits shape {logits.shape}")
    ax = axis % logits.ndim
    x = logits.data - logits.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=ax, keepdims=True))
    logq = x - lse
    n = logits.size // logits.shape[ax]
    loss = -(t * logq).sum() / n

    def bw(g):
        q = np.exp(logq)
        return (g * (q * t.sum(axis=ax, keepdims=True) - t) / n,)

    return Tensor._from_op(np.asarray(loss), (logits,), bw, "cross_entropy_with_logits")


def binary_cross_entropy_with_logits(logits, target) -> Tensor:
    """Mean of ``softplus(z) - t*z`` (the stable form of binary cross-entropy)."""
    logits = _as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    n = z.size
    loss = (np.logaddexp(0.0, z) - t * z).sum() / n

    def bw(g):
        return (g * (_stable_sigmoid(z) - t) / n,)

    return Tensor._from_op(np.asarray(loss), (logits,), bw, "binary_cross_entropy_with_logits")


DIFFERENTIABLE_OPS: tuple[str, ...] = (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "abs",
    "relu",
    "sigmoid",
    "softplus",
    "where",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "embedding",
    "softmax",
    "log_softmax",
    "max_reduce",
    "cosine_similarity",
    "cosine_matrix",
    "margin_hinge",
    "layer_norm",
    "conv",
    "upsample_nearest",
    "interp_linear_axis",
    "upsample_linear",
    "cross_entropy_with_logits",
    "binary_cross_entropy_with_logits",
)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
