"""Coding rate R_ε of a feature set, its gradient, and the gradient-norm bound.

For unit-column features Z ∈ R^{d×n} and Γ = ZZᵀ/n,

    R_ε(Γ) = ½ logdet(I + (d/ε²) Γ).

With α = d/(nε²) the gradient w.r.t. Z is exactly α(I + αZZᵀ)⁻¹Z, so for
r = min(d, n)

    ‖∇_Z R_ε‖_F² = α² Σᵢ σᵢ²/(1 + ασᵢ²)² ≤ α r/4,

which gives the certified bound ``√(d·r/n) / (2ε)``. The often-quoted
constant 1/(4ε) comes from writing the gradient of logdet(I + αZZᵀ) without
its factor 2; it is reported next to the certified constant by
:func:`verify_theorem` and is not used as the certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T

UNIT_TOL = 1e-8

#: Constant in front of √(d·min(d,n)/n)/ε that the finite-difference-validated
#: gradient certifies.
CERTIFIED_CONSTANT = 0.5
#: Constant stated alongside the original bound; violated by some inputs.
QUOTED_CONSTANT = 0.25


@dataclass(frozen=True)
class CodingRateConfig:
    eps: float = 0.5
    use_centered: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class SpectrumAssignment:
    d: int
    n: int
    alpha: float
    x: np.ndarray

    @property
    def r(self) -> int:
        return len(self.x)

    def objective(self) -> float:
        """g(x) = Σ xᵢ/(1 + αxᵢ)²."""
        return float(np.sum(self.x / (1.0 + self.alpha * self.x) ** 2))

    def sandwich(self) -> tuple[float, float]:
        return (self.r - 1) / (4 * self.alpha), self.r / (4 * self.alpha)


def _data(Z) -> np.ndarray:
    return Z.data if isinstance(Z, T.Tensor) else np.asarray(Z, dtype=np.float64)


def check_unit_columns(Z, tol: float = UNIT_TOL) -> None:
    Zd = _data(Z)
    if Zd.ndim != 2:
        raise ValueError(f"features must be a d×n matrix, got shape {Zd.shape}")
    err = np.abs(np.sqrt((Zd * Zd).sum(axis=0)) - 1.0)
    worst = int(np.argmax(err))
    if err[worst] > tol:
        norm = float(np.sqrt(Zd[:, worst] @ Zd[:, worst]))
        raise ValueError(f"column {worst} is not unit norm (norm={norm!r})")


def second_moment(Z, use_centered: bool = False) -> np.ndarray:
    Zd = _data(Z)
    if use_centered:
        Zd = Zd - Zd.mean(axis=1, keepdims=True)
    return Zd @ Zd.T / Zd.shape[1]


def coding_rate(Z, cfg: CodingRateConfig = CodingRateConfig()) -> T.Tensor:
    """½ logdet(I + (d/ε²)Γ) of a d×n unit-column feature matrix.

    ``Z`` may be a :class:`~simdino.tensor.Tensor` (the result is then
    differentiable w.r.t. it) or a plain array.
    """
    Z = T.as_tensor(Z)
    check_unit_columns(Z)
    d, n = Z.shape
    if n < 2:
        raise ValueError(f"need at least 2 feature columns, got {n}")
    if cfg.use_centered:
        Z = T.sub(Z, T.mean(Z, axis=1, keepdims=True))
    gram = T.matmul(Z, Z.T)
    M = T.add(np.eye(d), T.scale(gram, d / (n * cfg.eps**2)))
    return T.scale(T.logdet_spd(M), 0.5)


def coding_rate_value(Z, cfg: CodingRateConfig = CodingRateConfig()) -> float:
    return coding_rate(_data(Z), cfg).item()


def coding_rate_grad(Z, cfg: CodingRateConfig = CodingRateConfig()) -> np.ndarray:
    """Analytic ∇_Z R_ε(ZZᵀ/n) = α(I + αZZᵀ)⁻¹Z, α = d/(nε²). Uncentered only."""
    if cfg.use_centered:
        raise ValueError("analytic gradient is defined for the uncentered second moment")
    Zd = _data(Z)
    check_unit_columns(Zd)
    d, n = Zd.shape
    alpha = d / (n * cfg.eps**2)
    M = np.eye(d) + alpha * (Zd @ Zd.T)
    L = _kernels.cholesky(0.5 * (M + M.T))
    return alpha * _kernels.cho_solve(L, Zd)


def grad_norm_bound(d: int, n: int, eps: float, constant: float = CERTIFIED_CONSTANT) -> float:
    """Upper bound on ‖∇_Z R_ε‖_F over all d×n unit-column Z."""
    return constant * math.sqrt(d * min(d, n) / n) / eps


def extremal_spectrum(d: int, n: int, eps: float) -> SpectrumAssignment:
    """Squared singular values x₁..x_{r−1} = 1/α, x_r = d − (r−1)/α.

    Requires ε² ≤ max(d/n, d²/n²) so that x_r ≥ 0.
    """
    threshold = max(d / n, d * d / (n * n))
    if eps * eps > threshold * (1 + 1e-12):
        raise ValueError(f"eps^2 = {eps * eps!r} exceeds the threshold max(d/n, d^2/n^2) = {threshold!r}")
    r = min(d, n)
    alpha = d / (n * eps**2)
    x = np.full(r, 1.0 / alpha)
    x[-1] = d - (r - 1) / alpha
    x[-1] = max(x[-1], 0.0)
    return SpectrumAssignment(d=d, n=n, alpha=alpha, x=x)


def gamma_heuristic(eps: float, d: int, n: int, c: float = 1.0) -> float:
    """Regularizer weight c·ε·√(n/(d·min(d,n))) balancing both gradient scales."""
    return c * eps * math.sqrt(n / (d * min(d, n)))


def random_unit_columns(rng: np.random.Generator, d: int, n: int, trials: int | None = None) -> np.ndarray:
    shape = (d, n) if trials is None else (trials, d, n)
    Z = rng.standard_normal(shape)
    return Z / np.linalg.norm(Z, axis=-2, keepdims=True)


def finite_difference_grad(Z: np.ndarray, cfg: CodingRateConfig, h: float = 1e-6) -> np.ndarray:
    """Central differences of R_ε w.r.t. every entry (no renormalization)."""
    Z = np.array(Z, dtype=np.float64)
    d, n = Z.shape

    def value(A):
        if cfg.use_centered:
            A = A - A.mean(axis=1, keepdims=True)
        M = np.eye(d) + (d / (n * cfg.eps**2)) * (A @ A.T)
        return 0.5 * np.linalg.slogdet(M)[1]

    out = np.empty_like(Z)
    for i in range(d):
        for j in range(n):
            old = Z[i, j]
            Z[i, j] = old + h
            fp = value(Z)
            Z[i, j] = old - h
            fm = value(Z)
            Z[i, j] = old
            out[i, j] = (fp - fm) / (2 * h)
    return out


@dataclass
class TheoremRow:
    d: int
    n: int
    eps: float
    trials: int
    fd_max_rel_err: float
    empirical_max: float
    bound: float
    ratio: float
    quoted_bound: float
    quoted_ratio: float
    sandwich_checked: bool
    sandwich_ok: bool
    sandwich_value: float | None

    @property
    def ok(self) -> bool:
        return self.ratio <= 1.0 and self.fd_max_rel_err < 1e-6 and (self.sandwich_ok or not self.sandwich_checked)


def verify_theorem(d: int, n: int, eps: float, trials: int, rng: np.random.Generator,
                   fd_trials: int = 3, batch: int = 2000) -> TheoremRow:
    """Random search for the largest ‖∇R_ε‖_F and comparison with the bound."""
    cfg = CodingRateConfig(eps=eps)
    alpha = d / (n * eps**2)
    worst = 0.0
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        Z = random_unit_columns(rng, d, n, m)
        worst = max(worst, float(np.max(_kernels.coding_rate_grad_norms(Z, alpha))))
        done += m

    fd_err = 0.0
    for _ in range(fd_trials):
        Z = random_unit_columns(rng, d, n)
        g = coding_rate_grad(Z, cfg)
        fd = finite_difference_grad(Z, cfg)
        fd_err = max(fd_err, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))

    bound = grad_norm_bound(d, n, eps)
    quoted = grad_norm_bound(d, n, eps, QUOTED_CONSTANT)
    checked = eps * eps <= max(d / n, d * d / (n * n))
    s_ok, s_val = False, None
    if checked:
        spec = extremal_spectrum(d, n, eps)
        s_val = spec.objective()
        lo, hi = spec.sandwich()
        s_ok = lo <= s_val <= hi
    return TheoremRow(d, n, eps, trials, fd_err, worst, bound, worst / bound, quoted,
                      worst / quoted, checked, s_ok, s_val)
