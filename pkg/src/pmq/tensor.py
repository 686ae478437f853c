"""Dense tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`; inputs are never mutated.  When at
least one operand has ``requires_grad`` set, the result keeps references to its
operands together with a closure mapping the output gradient to operand
gradients.  :func:`backward` replays that record in reverse topological order.

Only the operations needed by the toy vision transformer are provided.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradRecord",
    "DimensionError",
    "ContractError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "swapaxes",
    "reshape",
    "sum_all",
    "mean",
    "softmax_rows",
    "layernorm",
    "gelu",
    "cross_entropy",
    "straight_through",
    "backward",
    "grad_record",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable n-d float array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = arr.astype(dtype, copy=False).view()
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)


def tensor(x, requires_grad: bool = False, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = np.asarray(c, dtype=a.dtype)
    return _result(a.data * c_arr, (a,), lambda g: (g * c_arr,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(np.matmul(ad, bd), (a, b), back)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(
        np.swapaxes(a.data, ax1, ax2),
        (a,),
        lambda g: (np.swapaxes(g, ax1, ax2),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),))


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, src).copy(),),
    )


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    src = a.shape

    def back(g):
        g = np.expand_dims(g, axis) / n
        return (np.broadcast_to(g, src).astype(a.dtype, copy=True),)

    return _result(a.data.mean(axis=axis), (a,), back)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row max."""
    y = _softmax(x.data)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine params must be ({d},), got {gamma.shape}, {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _result(xhat * gd + beta.data, (x, gamma, beta), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = np.asarray(_GELU_C, dtype=x.dtype)
    a = np.asarray(0.044715, dtype=x.dtype)
    u = c * (xd + a * xd**3)
    t = np.tanh(u)

    def back(g):
        du = c * (1.0 + 3.0 * a * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(0.5 * xd * (1.0 + t), (x,), back)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits`` [B, C] against integer ``labels`` [B]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    rows = np.arange(b)
    total = -logp[rows, labels].sum()
    div = b if reduction == "mean" else 1

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / div),)

    return _result(np.asarray(total / div, dtype=logits.dtype), (logits,), back)


def straight_through(x: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply ``fn`` in the forward pass and pass gradients through unchanged."""
    out = np.asarray(fn(x.data), dtype=x.dtype)
    if out.shape != x.shape:
        raise DimensionError(f"straight-through fn changed shape {x.shape} -> {out.shape}")
    return _result(out, (x,), lambda g: (g,))


class GradRecord:
    """Nodes reachable from a scalar output, in the order backward visits them."""

    def __init__(self, loss: Tensor):
        if loss.data.size != 1 or loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.nodes: list[Tensor] = _topo_order(loss)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones((), dtype=self.loss.dtype)}
        for node in self.nodes:
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def grad_record(loss: Tensor) -> GradRecord:
    return GradRecord(loss)


def backward(loss: Tensor | GradRecord, wrt: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Parameters the loss does not depend on get zero gradients.
    """
    record = loss if isinstance(loss, GradRecord) else GradRecord(loss)
    grads = record.replay()
    items = wrt.items() if isinstance(wrt, Mapping) else wrt
    out: dict[str, np.ndarray] = {}
    for name, t in items:
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return out
