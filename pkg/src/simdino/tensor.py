"""A small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable function returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output adjoint to parent adjoints. Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order.

Broadcasting is supported only in the elementwise binary ops (bias adds,
masks), and ``matmul`` shares a 2-D right operand across leading batch axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from ._kernels import NotPositiveDefiniteError

__all__ = [
    "Tensor",
    "NotPositiveDefiniteError",
    "as_tensor",
    "backward",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "concat",
    "take",
    "getitem",
    "sum",
    "mean",
    "gelu",
    "exp",
    "log",
    "softmax",
    "softmax_rows",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "l2_normalize_columns",
    "cholesky",
    "logdet_spd",
    "spd_solve",
]

SYMMETRY_TOL = 1e-10


class Tensor:
    """Dense float64 array that may participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_stopped", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._stopped = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._stopped = False
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate adjoints from a scalar ``loss``.

    Leaves created with ``requires_grad=True`` get their ``.grad`` accumulated.
    Returns a map from every tracked tensor in the graph to its adjoint.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return out
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        out[node] = g
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Constant copy of ``x``; no adjoint flows back through it."""
    out = Tensor(np.array(x.data, copy=True))
    out._stopped = True
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(_kernels.gelu(xd), (x,), lambda g: (_kernels.gelu_grad(xd, g),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((y * (g - (g * y).sum(axis=axis, keepdims=True))) / temperature,)

    return _make(y, (x,), bw)


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    return softmax(x, axis=-1, temperature=temperature)


def log_softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gxhat = g * gd
        n = xd.shape[-1]
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norms <= 1e-12):
        flat = np.moveaxis(norms, axis, -1).reshape(-1)
        bad = int(np.argmax(flat <= 1e-12))
        raise ValueError(f"cannot normalize: vector {bad} has norm {float(flat[bad])!r} <= 1e-12")
    y = xd / norms

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norms,)

    return _make(y, (x,), bw)


def l2_normalize_columns(x: Tensor) -> Tensor:
    """Unit-normalize each column of a d×n matrix."""
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=0))
    bad = np.nonzero(norms <= 1e-12)[0]
    if bad.size:
        raise ValueError(f"column {int(bad[0])} has norm {float(norms[bad[0]])!r} <= 1e-12")
    return l2_normalize(x, axis=0)


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the adjoint."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _make(np.array(x.data[idx]), (x,), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# SPD linear algebra
# ---------------------------------------------------------------------------


def _symmetrize_checked(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"matrix is not symmetric: max |a - aᵀ| = {asym:.3e}")
    return 0.5 * (a + a.T)


def cholesky(a: Tensor) -> Tensor:
    """Lower-triangular L with L Lᵀ = a."""
    a = as_tensor(a)
    L = _kernels.cholesky(_symmetrize_checked(a.data))

    def bw(gL):
        # Murray (2016): Φ(Lᵀ Ḡ) with Φ taking the lower triangle and halving the diagonal
        P = np.tril(L.T @ gL)
        P[np.diag_indices_from(P)] *= 0.5
        S = _tri_sandwich(L, P)
        return (0.5 * (S + S.T),)

    return _make(L, (a,), bw)


def _tri_sandwich(L: np.ndarray, P: np.ndarray) -> np.ndarray:
    """L⁻ᵀ P L⁻¹ via two triangular solves."""
    # X = L⁻ᵀ P  ->  Lᵀ X = P
    X = _solve_upper_lt(L, P)
    # Y = X L⁻¹ -> Yᵀ = L⁻ᵀ Xᵀ
    return _solve_upper_lt(L, X.T).T


def _solve_upper_lt(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    # solves Lᵀ X = B using the kernel's back substitution
    if _kernels.HAVE_NUMBA:
        return _kernels._backward_sub_lt_nb(np.ascontiguousarray(L), np.ascontiguousarray(B))
    return _kernels._backward_sub_lt_np(L, B)


def logdet_spd(a: Tensor) -> Tensor:
    """log det(a) = 2 Σ log Lᵢᵢ; adjoint is a⁻¹ (symmetrized)."""
    a = as_tensor(a)
    L = _kernels.cholesky(_symmetrize_checked(a.data))
    val = 2.0 * np.sum(np.log(np.diag(L)))

    def bw(g):
        inv = _kernels.cho_solve(L, np.eye(L.shape[0]))
        return (g * 0.5 * (inv + inv.T),)

    return _make(np.asarray(val), (a,), bw)


def spd_solve(a: Tensor, b: Tensor) -> Tensor:
    """x with a·x = b for SPD ``a``; ``b`` is d×n."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ValueError(f"spd_solve shape mismatch: {a.shape} vs {b.shape}")
    L = _kernels.cholesky(_symmetrize_checked(a.data))
    x = _kernels.cho_solve(L, b.data)

    def bw(g):
        gb = _kernels.cho_solve(L, g)
        ga = -gb @ x.T
        return 0.5 * (ga + ga.T), gb

    return _make(x, (a, b), bw)
