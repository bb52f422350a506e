"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a tensor that requires gradients appends a node to the
implicit tape. Node ids come from a monotone counter, so sorting by id is a
valid topological order and ``backward`` walks it in strictly descending id.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "NumericError",
    "Tensor",
    "tensor",
    "matmul",
    "add",
    "sub",
    "scale",
    "tanh",
    "add_row",
    "mse",
    "sum_squares",
    "total",
    "hcat",
    "vcat",
    "cols",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


_ids = itertools.count(1)


class Tensor:
    """Row-major float64 array that can take part in a gradient tape.

    ``node_id`` is ``None`` for constants. Leaves that require grad and every
    op output downstream of one carry an id; ``_parents`` and ``_vjp`` hold
    what ``backward`` needs to push cotangents to the inputs.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = next(_ids) if requires_grad else None
        self._parents: Tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Tuple[np.ndarray, ...]]] = None
        self.name = name

    @classmethod
    def _result(cls, value: np.ndarray, parents: Sequence["Tensor"], vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = value
        out.name = ""
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out.node_id = next(_ids)
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out.node_id = None
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("elementwise tensor products are not supported; use scale()")
        return scale(self, float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[m x k]`` and ``b[k x n]``.

    A 1-D ``a`` is treated as a single row and the result stays 1-D.
    """
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data
    value = av @ bv

    def vjp(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return Tensor._result(value, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._result(y, (a,), lambda g: (g * (1.0 - y * y),))


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` (length n) added to every row of ``x[.. x n]``."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_row: cannot add bias {bias.shape} to rows of {x.shape}")
    xv = x.data

    def vjp(g):
        gb = g if xv.ndim == 1 else g.sum(axis=0)
        return g, gb

    return Tensor._result(xv + bias.data, (x, bias), vjp)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    _same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size
    if n == 0:
        raise ContractError("mse of empty tensors")
    value = np.array(np.dot(diff.ravel(), diff.ravel()) / n)

    def vjp(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return Tensor._result(value, (pred, target), vjp)


def sum_squares(a: Tensor) -> Tensor:
    flat = a.data.ravel()
    av = a.data
    return Tensor._result(np.array(np.dot(flat, flat)), (a,), lambda g: (2.0 * float(g) * av,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements."""
    shape = a.shape
    return Tensor._result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def hcat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = tuple(parts)
    widths = [p.shape[-1] for p in parts]
    value = np.concatenate([p.data for p in parts], axis=-1)
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(parts)))

    return Tensor._result(value, parts, vjp)


def vcat(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along rows."""
    parts = tuple(parts)
    heights = [p.shape[0] for p in parts]
    value = np.concatenate([p.data for p in parts], axis=0)
    edges = np.cumsum([0] + heights)

    def vjp(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(parts)))

    return Tensor._result(value, parts, vjp)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return Tensor._result(a.data[..., start:stop].copy(), (a,), vjp)


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) for every reachable leaf.

    Returns a dict keyed by the leaf tensors that require grad. Leaves that do
    not influence ``loss`` are absent; callers treat them as zero.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    nodes: Dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        for p in t._parents:
            if p.requires_grad and p.node_id not in nodes:
                stack.append(p)

    cotangents: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = cotangents.pop(nid, None)
        if g is None:
            continue
        if t._vjp is None:
            leaves[t] = g
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if not parent.requires_grad:
                continue
            prev = cotangents.get(parent.node_id)
            cotangents[parent.node_id] = pg if prev is None else prev + pg
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], theta: Tensor, eps: float = 1e-4) -> float:
    """Largest per-coordinate mismatch between backprop and central differences.

    ``f`` is called with ``theta`` itself; coordinates are perturbed in place
    and restored. The error of coordinate i is
    ``|analytic_i - numeric_i| / max(1, |analytic_i|)``.
    """
    if not theta.requires_grad:
        raise ContractError("grad_check needs a tensor with requires_grad=True")
    loss = f(theta)
    analytic = backward(loss).get(theta)
    if analytic is None:
        analytic = np.zeros_like(theta.data)
    flat = theta.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(theta).item()
        flat[i] = orig - eps
        lo = f(theta).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
