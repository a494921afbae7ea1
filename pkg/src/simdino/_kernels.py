"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with the same signature. The numba path is used when numba imports cleanly
and ``SIMDINO_DISABLE_NUMBA`` is unset (or ``0``); set it to ``1`` to force
the numpy path, e.g. for benchmarking or debugging.

Both paths agree to rounding; bit-level determinism is guaranteed only
within one backend.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky pivot is not strictly positive."""

    def __init__(self, index: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {index} = {value!r}")
        self.index = index
        self.value = value


def _numba_requested() -> bool:
    return os.environ.get("SIMDINO_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


try:  # pragma: no cover - depends on environment
    if not _numba_requested():
        raise ImportError("numba disabled by SIMDINO_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _cholesky_np(a):
    d = a.shape[0]
    L = np.zeros_like(a)
    for j in range(d):
        row = L[j, :j]
        piv = a[j, j] - row @ row
        if not piv > 0.0:
            return L, j, piv
        L[j, j] = math.sqrt(piv)
        if j + 1 < d:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ row) / L[j, j]
    return L, -1, 0.0


def _forward_sub_np(L, b):
    d = L.shape[0]
    x = np.empty_like(b)
    for i in range(d):
        x[i] = (b[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x


def _backward_sub_lt_np(L, b):
    # solves L^T x = b
    d = L.shape[0]
    x = np.empty_like(b)
    for i in range(d - 1, -1, -1):
        x[i] = (b[i] - L[i + 1:, i] @ x[i + 1:]) / L[i, i]
    return x


def _gelu_np(x):
    return 0.5 * x * (1.0 + _erf(x / _SQRT2))


def _gelu_grad_np(x, g):
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def _resize_axis_weights(n_in, n_out):
    """Bilinear (align_corners=False) sampling: index pairs and weights."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def _bilinear_resize_np(img, out_h, out_w):
    C, H, W = img.shape
    y0, y1, wy = _resize_axis_weights(H, out_h)
    x0, x1, wx = _resize_axis_weights(W, out_w)
    top = img[:, y0, :] * (1.0 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    return top[:, :, x0] * (1.0 - wx)[None, None, :] + top[:, :, x1] * wx[None, None, :]


def _grad_norms_np(Z, alpha):
    # Z: (T, d, n) stacked unit-column matrices
    T, d, _ = Z.shape
    M = np.eye(d)[None] + alpha * Z @ np.swapaxes(Z, 1, 2)
    G = alpha * np.linalg.solve(M, Z)
    return np.sqrt(np.sum(G * G, axis=(1, 2)))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _cholesky_nb(a):
        d = a.shape[0]
        L = np.zeros_like(a)
        for j in range(d):
            s = a[j, j]
            for k in range(j):
                s -= L[j, k] * L[j, k]
            if not s > 0.0:
                return L, j, s
            ljj = math.sqrt(s)
            L[j, j] = ljj
            for i in range(j + 1, d):
                t = a[i, j]
                for k in range(j):
                    t -= L[i, k] * L[j, k]
                L[i, j] = t / ljj
        return L, -1, 0.0

    @njit(cache=True)
    def _forward_sub_nb(L, b):
        d, m = b.shape
        x = np.empty_like(b)
        for c in range(m):
            for i in range(d):
                s = b[i, c]
                for k in range(i):
                    s -= L[i, k] * x[k, c]
                x[i, c] = s / L[i, i]
        return x

    @njit(cache=True)
    def _backward_sub_lt_nb(L, b):
        d, m = b.shape
        x = np.empty_like(b)
        for c in range(m):
            for i in range(d - 1, -1, -1):
                s = b[i, c]
                for k in range(i + 1, d):
                    s -= L[k, i] * x[k, c]
                x[i, c] = s / L[i, i]
        return x

    @njit(cache=True)
    def _gelu_flat_nb(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v / 1.4142135623730951))
        return out

    @njit(cache=True)
    def _gelu_grad_flat_nb(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            cdf = 0.5 * (1.0 + math.erf(v / 1.4142135623730951))
            pdf = 0.3989422804014327 * math.exp(-0.5 * v * v)
            out[i] = g[i] * (cdf + v * pdf)
        return out

    @njit(cache=True)
    def _bilinear_resize_nb(img, out_h, out_w):
        C, H, W = img.shape
        out = np.empty((C, out_h, out_w))
        sy = H / out_h
        sx = W / out_w
        for i in range(out_h):
            fy = (i + 0.5) * sy - 0.5
            fy = min(max(fy, 0.0), H - 1.0)
            y0 = int(math.floor(fy))
            y1 = min(y0 + 1, H - 1)
            wy = fy - y0
            for j in range(out_w):
                fx = (j + 0.5) * sx - 0.5
                fx = min(max(fx, 0.0), W - 1.0)
                x0 = int(math.floor(fx))
                x1 = min(x0 + 1, W - 1)
                wx = fx - x0
                for c in range(C):
                    top = img[c, y0, x0] * (1.0 - wx) + img[c, y0, x1] * wx
                    bot = img[c, y1, x0] * (1.0 - wx) + img[c, y1, x1] * wx
                    out[c, i, j] = top * (1.0 - wy) + bot * wy
        return out

    @njit(cache=True)
    def _grad_norms_nb(Z, alpha):
        T, d, n = Z.shape
        out = np.empty(T)
        for t in range(T):
            z = Z[t]
            M = alpha * (z @ z.T)
            for i in range(d):
                M[i, i] += 1.0
            L, piv, _ = _cholesky_nb(M)
            y = _forward_sub_nb(L, z)
            x = _backward_sub_lt_nb(L, y)
            s = 0.0
            for i in range(d):
                for j in range(n):
                    s += x[i, j] * x[i, j]
            out[t] = alpha * math.sqrt(s)
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    fn = _cholesky_nb if HAVE_NUMBA else _cholesky_np
    L, piv, val = fn(a)
    if piv >= 0:
        raise NotPositiveDefiniteError(int(piv), float(val))
    return L


def cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L Lᵀ) x = b given the lower factor ``L``; ``b`` is 1-D or 2-D."""
    b = np.asarray(b, dtype=np.float64)
    vec = b.ndim == 1
    b2 = np.ascontiguousarray(b.reshape(b.shape[0], -1))
    L = np.ascontiguousarray(L)
    if HAVE_NUMBA:
        x = _backward_sub_lt_nb(L, _forward_sub_nb(L, b2))
    else:
        x = _backward_sub_lt_np(L, _forward_sub_np(L, b2))
    return x[:, 0] if vec else x


def gelu(x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        return _gelu_flat_nb(flat).reshape(x.shape)
    return _gelu_np(x)


def gelu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of exact (erf) GELU."""
    if HAVE_NUMBA:
        fx = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        fg = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
        return _gelu_grad_flat_nb(fx, fg).reshape(x.shape)
    return _gelu_grad_np(x, g)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a C×H×W image, bilinear with the half-pixel (align_corners=False) convention.

    Output pixel (i, j) samples the source at
    ``y = clip((i + 0.5)·H/out_h − 0.5, 0, H−1)`` and likewise for x.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    if HAVE_NUMBA:
        return _bilinear_resize_nb(img, int(out_h), int(out_w))
    return _bilinear_resize_np(img, int(out_h), int(out_w))


def coding_rate_grad_norms(Z: np.ndarray, alpha: float) -> np.ndarray:
    """‖α(I + αZZᵀ)⁻¹Z‖_F for each matrix in a (T, d, n) stack."""
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if HAVE_NUMBA:
        return _grad_norms_nb(Z, float(alpha))
    return _grad_norms_np(Z, float(alpha))


resize_axis_weights = _resize_axis_weights
