"""Self-distillation objectives.

``simdino`` and ``simdinov2`` compare ℓ²-normalized features directly with
½‖x − y‖² and subtract γ times the coding rate of the student's global-view
class features. ``dino_baseline`` keeps the prototype head, temperature
softmax, centering and symmetrized cross-entropy for comparison.

Batched features are laid out ``(views, batch, d)`` for class tokens and
``(views, batch, N, d)`` for patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .coding_rate import CodingRateConfig, coding_rate

MODES = ("simdino", "simdinov2", "dino_baseline")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "simdino"
    gamma: float = 1.0
    eps: float = 0.5
    use_centered: bool = False
    temperature: float = 0.04  # teacher τ (baseline)
    student_temperature: float = 0.1
    center_momentum: float = 0.9
    n_prototypes: int = 256
    mask_prob: float = 0.5
    mask_ratio: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}; expected one of {MODES}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.temperature > 0 or not self.student_temperature > 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ValueError(f"center momentum must lie in [0, 1], got {self.center_momentum}")

    @property
    def coding(self) -> CodingRateConfig:
        return CodingRateConfig(self.eps, self.use_centered)


@dataclass
class CenterState:
    center: np.ndarray
    decay: float = 0.9


@dataclass
class LossParts:
    total: T.Tensor
    distance: T.Tensor
    regularizer: T.Tensor | None = None
    patch: T.Tensor | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# pairwise functionals on plain arrays
# ---------------------------------------------------------------------------


def _check_unit(x, name, tol=1e-8):
    n = float(np.linalg.norm(x))
    if abs(n - 1.0) > tol:
        raise ValueError(f"{name} must be unit norm, got norm {n!r}")


def d_l2(x, y) -> float:
    """½‖x − y‖² for unit vectors, evaluated as 1 − xᵀy."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_unit(x, "x")
    _check_unit(y, "y")
    return float(1.0 - x @ y)


def _check_simplex(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability vector")
    return p


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def cross_entropy(p, q) -> float:
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    support = p > 0
    if np.any(q[support] == 0):
        i = int(np.argmax(support & (q == 0)))
        raise ValueError(f"log of zero: q[{i}] = 0 where p[{i}] > 0")
    return float(-np.sum(p[support] * np.log(q[support])))


def d_ce(p, q) -> float:
    """½(CE(p, q) + CE(q, p))."""
    return 0.5 * (cross_entropy(p, q) + cross_entropy(q, p))


def ce_decomposition(p, q) -> tuple[float, float]:
    """Split d_ce into the symmetrized KL term and the mean-entropy term."""
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if np.any((q == 0) & (p > 0)) or np.any((p == 0) & (q > 0)):
        raise ValueError("log of zero: supports of p and q differ")
    s = (p > 0) & (q > 0)
    lr = np.log(p[s]) - np.log(q[s])
    d_js = 0.5 * float(np.sum(p[s] * lr) - np.sum(q[s] * lr))
    return d_js, 0.5 * (entropy(p) + entropy(q))


# ---------------------------------------------------------------------------
# pairing plan
# ---------------------------------------------------------------------------


def pairing_plan(n_student_views: int, n_teacher_views: int = 2,
                 exclude_same: bool = True) -> list[tuple[int, int]]:
    """(student view, teacher view) pairs.

    Student views are numbered globals first, so student view ``v`` and
    teacher view ``v`` share a crop for ``v < n_teacher_views``; those pairs
    are skipped when ``exclude_same``.
    """
    return [(s, t) for s in range(n_student_views) for t in range(n_teacher_views)
            if not (exclude_same and s == t)]


def _pair_mean_distance(student_cls: list[T.Tensor], teacher_cls: list[T.Tensor], plan) -> T.Tensor:
    terms = []
    for s, t in plan:
        dots = T.sum(T.mul(student_cls[s], teacher_cls[t]), axis=-1)  # (B,)
        terms.append(T.sub(1.0, T.mean(dots)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def _regularizer(student_cls: list[T.Tensor], n_global: int, cfg: LossConfig) -> T.Tensor:
    B = student_cls[0].shape[0]
    if B < 2:
        raise ValueError(f"batch size must be at least 2 for the covariance estimate, got {B}")
    rates = [coding_rate(T.swap_last(student_cls[g]), cfg.coding) for g in range(n_global)]
    total = rates[0]
    for r in rates[1:]:
        total = T.add(total, r)
    return T.scale(total, 1.0 / n_global)


def _as_views(x) -> list[T.Tensor]:
    if isinstance(x, T.Tensor):
        return [x[i] for i in range(x.shape[0])]
    return [T.as_tensor(v) for v in x]


def simdino_loss(student_cls, teacher_cls, cfg: LossConfig, plan=None) -> LossParts:
    """E[d_ℓ²(student, teacher)] − γ·mean over global views of R_ε(student cls batch).

    ``student_cls``: sequence of (B, d) tensors, global views first.
    ``teacher_cls``: sequence of (B, d) tensors for the teacher's global views,
    expected to be stop-gradient constants.
    """
    student_cls = _as_views(student_cls)
    teacher_cls = _as_views(teacher_cls)
    n_glob = len(teacher_cls)
    if plan is None:
        plan = pairing_plan(len(student_cls), n_glob)
    dist = _pair_mean_distance(student_cls, teacher_cls, plan)
    reg = _regularizer(student_cls, n_glob, cfg)
    total = T.sub(dist, T.scale(reg, cfg.gamma)) if cfg.gamma else dist
    return LossParts(total, dist, reg)


def masked_patch_distance(student_patch: T.Tensor, teacher_patch: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Mean over (B views) of (1/N) Σᵢ d_ℓ²(student i, teacher i)·1ᵢ.

    ``student_patch``/``teacher_patch``: (B, N, d); ``mask``: (B, N) 0/1.
    """
    if student_patch.shape != teacher_patch.shape:
        raise ValueError(f"patch features misaligned: {student_patch.shape} vs {teacher_patch.shape}")
    B, N, _ = student_patch.shape
    if mask.shape != (B, N):
        raise ValueError(f"mask shape {mask.shape} does not match patches {(B, N)}")
    dots = T.sum(T.mul(student_patch, teacher_patch), axis=-1)  # (B, N)
    per = T.mul(T.sub(1.0, dots), T.Tensor(mask.astype(np.float64)))
    return T.scale(T.sum(per), 1.0 / (B * N))


def simdinov2_loss(student_cls, teacher_cls, student_patch, teacher_patch, masks,
                   cfg: LossConfig, plan=None) -> LossParts:
    """½[cls distance + masked patch distance] − γ R_ε.

    ``student_patch``/``teacher_patch``: per global view (B, N, d) tensors for
    the same crop; ``masks``: per global view (B, N) indicators of the
    student copy. The patch term averages over every global view of every
    image, so an unmasked view contributes zero.
    """
    student_cls = _as_views(student_cls)
    teacher_cls = _as_views(teacher_cls)
    n_glob = len(teacher_cls)
    if plan is None:
        plan = pairing_plan(len(student_cls), n_glob)
    cls_term = _pair_mean_distance(student_cls, teacher_cls, plan)
    patch_terms = [masked_patch_distance(student_patch[g], teacher_patch[g], np.asarray(masks[g]))
                   for g in range(n_glob)]
    patch = patch_terms[0]
    for p in patch_terms[1:]:
        patch = T.add(patch, p)
    patch = T.scale(patch, 1.0 / n_glob)
    dist = T.scale(T.add(cls_term, patch), 0.5)
    reg = _regularizer(student_cls, n_glob, cfg)
    total = T.sub(dist, T.scale(reg, cfg.gamma)) if cfg.gamma else dist
    return LossParts(total, dist, reg, patch, {"cls_term": cls_term})


# ---------------------------------------------------------------------------
# DINO baseline
# ---------------------------------------------------------------------------


def prototype_logits(z: T.Tensor, prototypes: T.Tensor) -> T.Tensor:
    """Scores against unit-normalized prototype rows; z is (..., d)."""
    W = T.l2_normalize(prototypes, axis=-1)
    return T.matmul(z, W.T)


def dino_baseline_head(z, prototypes, tau: float, center=None):
    """softmax((W z − μ)/τ) with W the row-normalized prototypes.

    Returns a Tensor when given Tensors, else a numpy array.
    """
    as_np = not isinstance(z, T.Tensor)
    z = T.as_tensor(z)
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, -1))
    prototypes = T.as_tensor(prototypes)
    logits = prototype_logits(z, prototypes)
    if center is not None:
        logits = T.sub(logits, T.as_tensor(center))
    p = T.softmax(logits, axis=-1, temperature=tau)
    if single:
        p = T.reshape(p, (-1,))
    return p.data if as_np else p


def update_center(state: CenterState, head_outputs: np.ndarray) -> CenterState:
    """μ ← νμ + (1 − ν)·mean of pre-softmax teacher scores over the batch."""
    head_outputs = np.asarray(head_outputs, dtype=np.float64)
    if head_outputs.size == 0:
        raise ValueError("empty batch")
    batch_mean = head_outputs.reshape(-1, head_outputs.shape[-1]).mean(axis=0)
    nu = state.decay
    return CenterState(nu * state.center + (1.0 - nu) * batch_mean, nu)


def dino_loss(student_cls, teacher_cls, student_protos: T.Tensor, teacher_protos: T.Tensor,
              center: np.ndarray, cfg: LossConfig, plan=None) -> LossParts:
    """Mean over plan pairs and batch of d_CE(p_student, p_teacher).

    Returns the teacher's pre-softmax scores in ``extras['teacher_logits']``
    for the centering update.
    """
    student_cls = _as_views(student_cls)
    teacher_cls = _as_views(teacher_cls)
    if plan is None:
        plan = pairing_plan(len(student_cls), len(teacher_cls))
    t_logits = [prototype_logits(t, teacher_protos) for t in teacher_cls]
    t_logp = [T.log_softmax(T.sub(l, T.Tensor(center)), temperature=cfg.temperature) for l in t_logits]
    t_p = [T.exp(lp) for lp in t_logp]
    s_logp = [T.log_softmax(prototype_logits(s, student_protos), temperature=cfg.student_temperature)
              for s in student_cls]
    s_p = [T.exp(lp) for lp in s_logp]
    terms = []
    for s, t in plan:
        ce_st = T.neg(T.sum(T.mul(s_p[s], t_logp[t]), axis=-1))
        ce_ts = T.neg(T.sum(T.mul(t_p[t], s_logp[s]), axis=-1))
        terms.append(T.scale(T.mean(T.add(ce_st, ce_ts)), 0.5))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    total = T.scale(total, 1.0 / len(terms))
    return LossParts(total, total, None, None,
                     {"teacher_logits": np.stack([l.data for l in t_logits])})
