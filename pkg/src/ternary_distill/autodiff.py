"""Dense FP32 tensors with reverse-mode automatic differentiation.

Only what the toy transformer and the training losses need is here. Every op
builds a node holding its parents and a backward closure; ``backward`` walks
the graph in reverse topological order and accumulates gradients additively.

Broadcasting is restricted to the trailing axes: ``b`` may be combined with
``a`` when ``b.shape`` is a suffix of ``a.shape`` (bias/gain style vectors,
causal masks).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher passes, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

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

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str = "custom",
) -> Tensor:
    """Wrap ``data`` as the output of an op with an arbitrary backward rule.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per parent. This is the hook used by straight-through estimators.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tensor requiring grad.

    Raises:
        ValueError: if ``root`` is not a scalar and no seed gradient is given.
    """
    if grad is None:
        if root.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
        grad = np.ones(root.shape, dtype=DTYPE)
    if not root.requires_grad:
        return

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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op} backward produced {pg.shape} for parent {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -- broadcasting helpers ----------------------------------------------------


def _check_trailing(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape):
        return
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not align on trailing axes")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else g


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        if isinstance(b, np.ndarray) and b.ndim:
            b = Tensor(b)
        else:
            a = as_tensor(a)
            c = float(b)
            return custom_op(a.data + DTYPE(c), (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_trailing(a.shape, b.shape, "add")
    bshape = b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)), "add")


def sub(a, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -np.asarray(b, dtype=DTYPE))


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        if isinstance(b, np.ndarray) and b.ndim:
            b = Tensor(b)
        else:
            return scale(as_tensor(a), float(b))
    a = as_tensor(a)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_trailing(a.shape, b.shape, "mul")
    ad, bd, bshape = a.data, b.data, b.shape

    def bw(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_to(g * ad, bshape) if b.requires_grad else None
        return ga, gb

    return custom_op(ad * bd, (a, b), bw, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return custom_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return custom_op(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient flows only where the input was not clamped."""
    keep = a.data >= lo
    return custom_op(np.maximum(a.data, DTYPE(lo)), (a,), lambda g: (g * keep,), "clamp_min")


# -- reductions -------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops --------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return custom_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return custom_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def select(a: Tensor, index: int) -> Tensor:
    """a[index] along the first axis."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return custom_op(a.data[index], (a,), bw, "select")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab}): min={ids.min()} max={ids.max()}")

    def bw(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return custom_op(table.data[ids], (table,), bw, "embedding")


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across all leading axes of ``a``) or carries
    exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return custom_op(out, (a, b), bw, "matmul")


# -- normalisation / probability ---------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x) | np.isneginf(x)):
        raise FloatingPointError("softmax received non-finite input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return custom_op(s.astype(DTYPE), (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return custom_op(out.astype(DTYPE), (a,), bw, "log_softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x**2) + eps) * gain over the last axis."""
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match last axis of {x.shape}")
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + DTYPE(eps))
    xhat = xd * inv

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        return gx, gg

    return custom_op(xhat * gd, (x, gain), bw, "rms_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd.astype(np.float64) ** 2).sum(axis=axis, keepdims=True)).astype(DTYPE)
    clipped = norm <= eps
    denom = np.maximum(norm, DTYPE(eps))
    y = xd / denom

    def bw(g):
        radial = np.where(clipped, 0.0, (g * y).sum(axis=axis, keepdims=True))
        return ((g - y * radial) / denom,)

    return custom_op(y, (x,), bw, "l2_normalize")


def cross_entropy_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions where ``mask`` is set.

    ``logits`` has shape [..., V]; ``targets`` and ``mask`` have the leading
    shape. An all-zero mask is a contract violation.
    """
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {z.shape[0]} positions")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    m = np.ones(t.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    n = int(m.sum())
    if n == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs.astype(np.float64)).sum(axis=1))
    nll = lse - zs[np.arange(t.shape[0]), t]
    loss = float((nll * m).sum() / n)

    def bw(g):
        p = np.exp(zs - lse[:, None].astype(DTYPE))
        p[np.arange(t.shape[0]), t] -= 1.0
        p *= (m / n)[:, None]
        return ((p * g).reshape(logits.shape).astype(DTYPE),)

    return custom_op(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")


# -- helpers ------------------------------------------------------------------------


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return total ** 0.5
