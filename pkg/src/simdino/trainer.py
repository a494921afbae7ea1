"""Teacher-student training loop, schedules, AdamW, EMA and checkpointing."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .coding_rate import CodingRateConfig, coding_rate_value, gamma_heuristic
from .config import RunConfig
from .data import Dataset
from .encoder import EncoderParams, forward_batch, init_params
from .evaluation import effective_rank
from .losses import (CenterState, LossConfig, dino_loss, pairing_plan, simdino_loss,
                     simdinov2_loss, update_center)
from .serialization import read_checkpoint, write_checkpoint
from .views import make_views

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "distance", "coding_rate", "grad_norm", "eff_rank", "lambda", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, quantity: str, value):
        super().__init__(f"non-finite {quantity} at step {step}: {value}")
        self.step = step
        self.quantity = quantity


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """``constant``, ``cosine`` (start→end), ``warmup_cosine`` (linear from
    ``warmup_from`` to start, then cosine to end) or ``warmup_constant``."""

    kind: str
    start: float
    end: float = 0.0
    warmup: int = 0
    total: int = 1
    warmup_from: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine", "warmup_cosine", "warmup_constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.warmup > self.total:
            raise ValueError(f"warmup {self.warmup} exceeds total {self.total}")


def schedule_value(s: Schedule, step: int) -> float:
    if step < 0 or step > s.total:
        warnings.warn(f"schedule step {step} outside [0, {s.total}]; clamped", RuntimeWarning, stacklevel=2)
        step = min(max(step, 0), s.total)
    if s.kind == "constant":
        return s.start
    if s.kind in ("warmup_cosine", "warmup_constant") and step < s.warmup:
        return s.warmup_from + (s.start - s.warmup_from) * step / s.warmup
    if s.kind == "warmup_constant":
        return s.start
    offset = s.warmup if s.kind == "warmup_cosine" else 0
    span = s.total - offset
    if span <= 0:
        return s.end
    frac = (step - offset) / span
    if frac >= 1.0:
        return s.end
    return s.start + (s.end - s.start) * 0.5 * (1.0 - math.cos(math.pi * frac))


def build_schedules(cfg: RunConfig) -> dict[str, Schedule]:
    total = max(cfg.steps, 1)
    warm = min(cfg.warmup_steps, total)
    return {
        "lr": Schedule("warmup_cosine", cfg.lr, cfg.lr_end, warm, total),
        "wd": Schedule("cosine", cfg.weight_decay, cfg.weight_decay_end, 0, total),
        "lambda": Schedule("cosine", cfg.momentum, cfg.momentum_end, 0, total),
        "teacher_temp": Schedule("warmup_constant", cfg.teacher_temp,
                                 warmup=min(cfg.teacher_temp_warmup_steps, total), total=total,
                                 warmup_from=cfg.teacher_temp_start),
    }


# ---------------------------------------------------------------------------
# parameter updates
# ---------------------------------------------------------------------------


def ema_update(teacher: EncoderParams, student: EncoderParams, lam: float) -> EncoderParams:
    """θ_t ← λθ_t + (1 − λ)θ_s in place; returns ``teacher``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {lam}")
    if not teacher.same_shapes(student):
        raise ValueError("teacher and student parameter shapes differ")
    for name, t in teacher.items():
        t.data = lam * t.data + (1.0 - lam) * student[name].data
    return teacher


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: EncoderParams, grads: dict[str, np.ndarray], lr: float, wd: float,
             lr_scale: dict[str, float] | None = None) -> None:
        """Adam moment update plus decoupled decay θ ← θ − lr·wd·θ on ≥2-D weights."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            eta = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
            data = p.data
            if wd and data.ndim >= 2:
                data = data * (1.0 - eta * wd)
            p.data = data - eta * (m / c1) / (np.sqrt(v / c2) + self.eps)


def layerwise_scales(params: EncoderParams, decay: float) -> dict[str, float] | None:
    if decay == 1.0:
        return None
    depth = params.cfg.depth
    out = {}
    for name in params:
        if name.startswith("blocks."):
            layer = int(name.split(".")[1]) + 1
        elif name.startswith(("patch_embed", "cls_token", "pos_table", "mask_token")):
            layer = 0
        else:
            layer = depth + 1
        out[name] = decay ** (depth + 1 - layer)
    return out


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    student: EncoderParams
    teacher: EncoderParams
    opt: AdamW
    step: int
    rng: np.random.Generator
    gamma: float | None = None
    center: CenterState | None = None

    def copy(self) -> "TrainState":
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = copy.deepcopy(self.rng.bit_generator.state)
        return TrainState(
            self.student.copy(), self.teacher.copy(requires_grad=False),
            AdamW(self.opt.beta1, self.opt.beta2, self.opt.eps,
                  {k: v.copy() for k, v in self.opt.m.items()},
                  {k: v.copy() for k, v in self.opt.v.items()}, self.opt.t),
            self.step, rng, self.gamma,
            None if self.center is None else CenterState(self.center.center.copy(), self.center.decay),
        )


def init_state(cfg: RunConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    student = init_params(cfg.encoder_config(), rng)
    teacher = student.copy(requires_grad=False)
    center = None
    if cfg.loss_mode == "dino_baseline":
        center = CenterState(np.zeros(cfg.n_prototypes), cfg.center_momentum)
    gamma = None if cfg.gamma_calibrate and cfg.loss_mode != "dino_baseline" else cfg.gamma
    return TrainState(student, teacher, AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps), 0, rng, gamma, center)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    metrics: dict
    audit: dict | None = None


def _encode_views(params, tokens, grid, mask=None, with_patches=False, drop_rng=None):
    """Encode (V, B, N, D) tokens as one batch; returns (V, B, d) and (V, B, N, d)."""
    V, B, N, D = tokens.shape
    flat_mask = None if mask is None else mask.reshape(V * B, N)
    fb = forward_batch(params, tokens.reshape(V * B, N, D), grid, flat_mask, with_patches,
                       drop_rng=drop_rng)
    cls = T.reshape(fb.z_cls, (V, B, -1))
    patches = None if fb.z_patch is None else T.reshape(fb.z_patch, (V, B, N, -1))
    return cls, patches


def calibrate_gamma(student_cls: list[np.ndarray], teacher_cls: list[np.ndarray], cfg: LossConfig,
                    scale: float = 1.0) -> float:
    """γ equalizing ‖∇_Z distance‖_F and ‖∇_Z R_ε‖_F at the given features, times ``scale``."""
    leaves = [T.Tensor(z, requires_grad=True) for z in student_cls]
    teach = [T.Tensor(z) for z in teacher_cls]
    probe = LossConfig(mode="simdino", gamma=0.0, eps=cfg.eps, use_centered=cfg.use_centered)
    parts = simdino_loss(leaves, teach, probe)
    T.backward(parts.distance)
    g_dist = math.sqrt(sum(float(np.sum(l.grad**2)) for l in leaves if l.grad is not None))
    for l in leaves:
        l.grad = None
    T.backward(parts.regularizer)
    g_reg = math.sqrt(sum(float(np.sum(l.grad**2)) for l in leaves if l.grad is not None))
    if g_reg == 0.0:
        return 0.0
    return scale * g_dist / g_reg


def train_step(state: TrainState, images: np.ndarray, cfg: RunConfig, audit: bool = False) -> StepResult:
    """Advance ``state`` by one optimization step on a batch of (B, C, H, W) images.

    Mutates ``state`` in place and returns the step's metrics.
    """
    if images.shape[0] < 2:
        raise ValueError(f"batch size must be at least 2, got {images.shape[0]}")
    step = state.step
    sched = build_schedules(cfg)
    lr = schedule_value(sched["lr"], step)
    wd = schedule_value(sched["wd"], step)
    lam = schedule_value(sched["lambda"], step)
    mode = cfg.loss_mode
    v2 = mode == "simdinov2"
    vcfg = cfg.view_config()
    views = make_views(images, vcfg, state.rng, cfg.mask_prob if v2 else 0.0,
                       (cfg.mask_ratio_min, cfg.mask_ratio_max))

    # teacher: global views only, unmasked, no graph
    t_cls, t_patch = _encode_views(state.teacher, views.global_tokens, views.global_grid, None, v2)
    t_cls = T.stop_gradient(t_cls)
    t_patch = None if t_patch is None else T.stop_gradient(t_patch)

    s_gcls, s_gpatch = _encode_views(state.student, views.global_tokens, views.global_grid,
                                     views.global_mask if v2 else None, v2, state.rng)
    s_views = [s_gcls[i] for i in range(vcfg.n_global)]
    if vcfg.n_local:
        s_lcls, _ = _encode_views(state.student, views.local_tokens, views.local_grid, None, False, state.rng)
        s_views += [s_lcls[i] for i in range(vcfg.n_local)]
    for v in s_views:
        if not np.all(np.isfinite(v.data)):
            raise TrainingDiverged(step, "student features", "nan/inf")
    t_views = [t_cls[i] for i in range(vcfg.n_global)]
    plan = pairing_plan(len(s_views), vcfg.n_global)

    if state.gamma is None:
        state.gamma = calibrate_gamma([s.data for s in s_views], [t.data for t in t_views],
                                      cfg.loss_config(0.0), cfg.gamma_scale)
        B = images.shape[0]
        log.info("calibrated gamma=%.6g (c=%.4g)", state.gamma,
                 state.gamma / gamma_heuristic(cfg.eps, cfg.out_dim, B))
    lcfg = cfg.loss_config(state.gamma if state.gamma is not None else cfg.gamma)

    teacher_logits = None
    if mode == "dino_baseline":
        temp = schedule_value(sched["teacher_temp"], step)
        lcfg = LossConfig(mode=mode, gamma=0.0, eps=cfg.eps, temperature=temp,
                          student_temperature=cfg.student_temp, center_momentum=cfg.center_momentum,
                          n_prototypes=cfg.n_prototypes)
        center = state.center.center if cfg.center_enabled else np.zeros(cfg.n_prototypes)
        parts = dino_loss(s_views, t_views, state.student["prototypes"],
                          T.stop_gradient(state.teacher["prototypes"]), center, lcfg, plan)
        teacher_logits = parts.extras["teacher_logits"]
    elif v2:
        parts = simdinov2_loss(s_views, t_views, [s_gpatch[i] for i in range(vcfg.n_global)],
                               [t_patch[i] for i in range(vcfg.n_global)],
                               [views.global_mask[i] for i in range(vcfg.n_global)], lcfg, plan)
    else:
        parts = simdino_loss(s_views, t_views, lcfg, plan)

    loss_val = parts.total.item()
    if not math.isfinite(loss_val):
        raise TrainingDiverged(step, "loss", loss_val)

    state.student.zero_grad()
    T.backward(parts.total)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in state.student.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(step, f"gradient of {k}", "nan/inf")
    gnorm = clip_grads(grads, cfg.grad_clip)
    state.opt.step(state.student, grads, lr, wd, layerwise_scales(state.student, cfg.layerwise_lr_decay))
    state.student.zero_grad()

    if cfg.mode == "no-distill":
        for k, p in state.teacher.items():
            p.data = state.student[k].data.copy()
    else:
        ema_update(state.teacher, state.student, lam)
    if teacher_logits is not None and cfg.center_enabled:
        state.center = update_center(state.center, teacher_logits)

    feats = np.concatenate([s.data for s in s_views[:vcfg.n_global]], axis=0).T
    metrics = {
        "step": step,
        "loss": loss_val,
        "distance": parts.distance.item(),
        # the baseline has no regularizer; log the rate of its features as a diagnostic
        "coding_rate": (parts.regularizer.item() if parts.regularizer is not None
                        else coding_rate_value(feats, CodingRateConfig(cfg.eps))),
        "grad_norm": gnorm,
        "eff_rank": effective_rank(feats),
        "lambda": lam,
        "lr": lr,
        "wd": wd,
        "gamma": state.gamma if state.gamma is not None else 0.0,
    }
    if v2:
        metrics["patch"] = parts.patch.item()
        metrics["masked_tokens"] = int(views.global_mask.sum())
    audit_rec = None
    if audit and v2:
        audit_rec = {
            "student_patch": s_gpatch.data.copy(),
            "teacher_patch": t_patch.data.copy(),
            "mask": views.global_mask.copy(),
            "patch": metrics["patch"],
        }
    state.step += 1
    return StepResult(metrics, audit_rec)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class HashMismatch(ValueError):
    def __init__(self, checkpoint_hash: str, config_hash: str):
        super().__init__(f"checkpoint config hash {checkpoint_hash} does not match run config hash {config_hash}")
        self.checkpoint_hash = checkpoint_hash
        self.config_hash = config_hash


def save_state(path, state: TrainState, cfg: RunConfig) -> None:
    blocks: dict[str, np.ndarray] = {}
    for prefix, params in (("student/", state.student), ("teacher/", state.teacher)):
        for k, p in params.items():
            blocks[prefix + k] = p.data
    for k, m in state.opt.m.items():
        blocks["adam_m/" + k] = m
    for k, v in state.opt.v.items():
        blocks["adam_v/" + k] = v
    if state.center is not None:
        blocks["center"] = state.center.center
    meta = {
        "step": state.step,
        "opt_t": state.opt.t,
        "rng": state.rng.bit_generator.state,
        "gamma": state.gamma,
        "center_decay": None if state.center is None else state.center.decay,
        "param_names": state.student.names(),
    }
    write_checkpoint(path, blocks, meta, cfg.hash())


def load_state(path, cfg: RunConfig, check_hash: bool = True) -> TrainState:
    blocks, meta, digest = read_checkpoint(path)
    if check_hash and digest != cfg.hash():
        raise HashMismatch(digest, cfg.hash())
    ecfg = cfg.encoder_config()
    names = meta["param_names"]
    student = EncoderParams.from_arrays(ecfg, {k: blocks["student/" + k] for k in names}, True)
    teacher = EncoderParams.from_arrays(ecfg, {k: blocks["teacher/" + k] for k in names}, False)
    ref = init_params(ecfg, np.random.default_rng(0))
    if not student.same_shapes(ref):
        raise ValueError("checkpoint parameter shapes do not match the configured architecture")
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps,
                {k[7:]: v for k, v in blocks.items() if k.startswith("adam_m/")},
                {k[7:]: v for k, v in blocks.items() if k.startswith("adam_v/")}, meta["opt_t"])
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    center = None
    if "center" in blocks:
        center = CenterState(blocks["center"], meta["center_decay"])
    return TrainState(student, teacher, opt, meta["step"], rng, meta["gamma"], center)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def sample_batch(state: TrainState, train_idx: np.ndarray, batch_size: int) -> np.ndarray:
    size = min(batch_size, len(train_idx))
    return np.sort(state.rng.choice(train_idx, size=size, replace=False))


def run_training(cfg: RunConfig, dataset: Dataset, state: TrainState | None = None,
                 out_dir=None, on_step=None, audit_every: int = 0, until: int | None = None):
    """Run ``cfg.steps`` total steps (resuming from ``state.step`` if given).

    ``until`` stops early at that step count without changing the schedules.

    Returns ``(state, metrics_log)`` where the log holds one dict per step run
    here. With ``out_dir`` and ``cfg.checkpoint_every`` set, writes
    ``ckpt_XXXXXX.bin`` periodically and ``final.bin`` at the end.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    train_idx = dataset.indices("train")
    if len(train_idx) < 2:
        raise ValueError("need at least 2 training images")
    state = init_state(cfg) if state is None else state
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    stop = cfg.steps if until is None else min(until, cfg.steps)
    while state.step < stop:
        batch = dataset.images[sample_batch(state, train_idx, cfg.batch_size)]
        audit = bool(audit_every) and state.step % audit_every == 0
        res = train_step(state, batch, cfg, audit=audit)
        history.append(res.metrics)
        if on_step is not None:
            on_step(state, res)
        if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_state(out / f"ckpt_{state.step:06d}.bin", state, cfg)
    if out is not None:
        save_state(out / "final.bin", state, cfg)
    return state, history
