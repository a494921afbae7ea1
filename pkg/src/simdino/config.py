"""Run configuration and its flat ``key = value`` file format.

One assignment per line; ``#`` starts a comment. Values are JSON literals
(numbers, ``true``/``false``, quoted strings) or bare words, which are read
as strings. Unknown keys are rejected with their line number.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .encoder import EncoderConfig
from .losses import LossConfig
from .views import ViewConfig

CLI_MODES = ("simdino", "simdinov2", "dino-baseline", "no-distill")

# keys that do not change the trained weights
_UNHASHED = ("out_dir", "checkpoint_every", "dataset")


# Pipeline-specific table values. Registers, drop path and layer scale stay
# off at desk scale for both pipelines (keys exist so they can be enabled).
MODE_PRESETS = {
    "simdino": dict(momentum=0.996, lr=0.002, grad_clip=0.3, pos_antialias=False),
    "simdinov2": dict(momentum=0.9, lr=0.004, grad_clip=3.0, pos_antialias=True),
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"field {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass
class RunConfig:
    # pipeline
    mode: str = "simdino"
    seed: int = 0
    steps: int = 500
    batch_size: int = 32
    # model
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    proj_hidden: int = 128
    out_dim: int = 32
    n_prototypes: int = 256
    n_registers: int = 0
    pos_antialias: bool = False
    layer_scale: float = 0.0
    drop_path: float = 0.0
    patch_head_tied: bool = False
    # views
    global_size: int = 32
    local_size: int = 16
    n_global: int = 2
    n_local: int = 6
    global_scale_min: float = 0.4
    global_scale_max: float = 1.0
    local_scale_min: float = 0.05
    local_scale_max: float = 0.4
    eval_short_edge: int = 36
    eval_size: int = 32
    # loss
    gamma: float = 1.0
    gamma_calibrate: bool = True
    gamma_scale: float = 1.0
    eps: float = 0.5
    use_centered: bool = False
    mask_prob: float = 0.5
    mask_ratio_min: float = 0.1
    mask_ratio_max: float = 0.5
    teacher_temp: float = 0.07
    teacher_temp_start: float = 0.04
    teacher_temp_warmup_steps: int = 150
    student_temp: float = 0.1
    center_momentum: float = 0.9
    center_enabled: bool = True
    # optimization
    lr: float = 0.002
    lr_end: float = 1e-6
    warmup_steps: int = 50
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    grad_clip: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    layerwise_lr_decay: float = 1.0
    momentum: float = 0.996
    momentum_end: float = 1.0
    # data
    dataset: str = ""
    n_classes: int = 3
    per_class: int = 100
    image_size: int = 64
    noise: float = 0.05
    # evaluation
    knn_k: int = 20
    probe_epochs: int = 500
    probe_lr: float = 1.0
    # io
    out_dir: str = "runs/default"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in CLI_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {CLI_MODES}", "mode")
        if self.gamma < 0:
            raise ConfigError(f"must be >= 0, got {self.gamma}", "gamma")
        if self.gamma_scale < 0:
            raise ConfigError(f"must be >= 0, got {self.gamma_scale}", "gamma_scale")
        for key in ("eps", "teacher_temp", "teacher_temp_start", "student_temp"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"must be positive, got {getattr(self, key)}", key)
        for key in ("steps", "warmup_steps", "teacher_temp_warmup_steps", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, key)}", key)
        if self.batch_size < 2:
            raise ConfigError(f"must be >= 2, got {self.batch_size}", "batch_size")
        if self.n_global < 1:
            raise ConfigError("at least one global view is required", "n_global")
        for key in ("global_size", "local_size", "eval_size"):
            if getattr(self, key) % self.patch_size:
                raise ConfigError(f"patch size {self.patch_size} does not divide {getattr(self, key)}", key)
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads {self.heads} do not divide embed_dim {self.embed_dim}", "heads")
        if self.eval_size > self.eval_short_edge:
            raise ConfigError("eval crop larger than the resized short edge", "eval_size")
        if self.n_registers < 0:
            raise ConfigError(f"must be >= 0, got {self.n_registers}", "n_registers")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.drop_path}", "drop_path")
        if self.layer_scale < 0:
            raise ConfigError(f"must be >= 0, got {self.layer_scale}", "layer_scale")
        for key in ("center_momentum", "mask_prob", "mask_ratio_min", "mask_ratio_max", "momentum", "momentum_end"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {getattr(self, key)}", key)

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "RunConfig":
        """Defaults for ``mode`` following the per-pipeline training table at desk scale."""
        if mode not in CLI_MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {CLI_MODES}", "mode")
        kw = dict(MODE_PRESETS["simdinov2" if mode == "simdinov2" else "simdino"])
        kw.update(mode=mode, **overrides)
        return cls(**kw)

    # --- derived component configs -----------------------------------
    @property
    def loss_mode(self) -> str:
        return {"dino-baseline": "dino_baseline", "no-distill": "simdino"}.get(self.mode, self.mode)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            in_chans=3, patch_size=self.patch_size, embed_dim=self.embed_dim, depth=self.depth,
            heads=self.heads, mlp_ratio=self.mlp_ratio, proj_hidden=self.proj_hidden,
            out_dim=self.out_dim, max_grid=self.global_size // self.patch_size,
            n_prototypes=self.n_prototypes if self.loss_mode == "dino_baseline" else 0,
            n_registers=self.n_registers, layer_scale=self.layer_scale, drop_path=self.drop_path,
            pos_antialias=self.pos_antialias,
            patch_head=self.loss_mode == "simdinov2" and not self.patch_head_tied,
        )

    def view_config(self) -> ViewConfig:
        return ViewConfig(
            patch_size=self.patch_size, global_size=self.global_size, local_size=self.local_size,
            n_global=self.n_global, n_local=self.n_local,
            global_scale=(self.global_scale_min, self.global_scale_max),
            local_scale=(self.local_scale_min, self.local_scale_max),
            eval_short_edge=self.eval_short_edge, eval_size=self.eval_size,
        )

    def loss_config(self, gamma: float | None = None) -> LossConfig:
        return LossConfig(
            mode=self.loss_mode, gamma=self.gamma if gamma is None else gamma, eps=self.eps,
            use_centered=self.use_centered, temperature=self.teacher_temp,
            student_temperature=self.student_temp, center_momentum=self.center_momentum,
            n_prototypes=self.n_prototypes, mask_prob=self.mask_prob,
            mask_ratio=(self.mask_ratio_min, self.mask_ratio_max),
        )

    # --- serialization ------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = ["# simdino run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {json.dumps(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = _strip_comment(raw)
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError("unknown key", key, lineno)
            if key in values:
                raise ConfigError("duplicate key", key, lineno)
            values[key] = _coerce(key, val, type(getattr(defaults, key)), lineno)
        try:
            return cls(**values)
        except ConfigError as exc:
            line = None
            for lineno, raw in enumerate(text.splitlines(), start=1):
                if raw.split("=", 1)[0].strip() == exc.key:
                    line = lineno
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.key, line) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _strip_comment(raw: str) -> str:
    quoted = False
    for i, ch in enumerate(raw):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return raw[:i].strip()
    return raw.strip()


def _coerce(key: str, val: str, typ: type, lineno: int):
    try:
        parsed = json.loads(val)
    except json.JSONDecodeError:
        parsed = val
    if typ is bool:
        if isinstance(parsed, bool):
            return parsed
    elif typ is int:
        if isinstance(parsed, int) and not isinstance(parsed, bool):
            return parsed
    elif typ is float:
        if isinstance(parsed, (int, float)) and not isinstance(parsed, bool):
            return float(parsed)
    elif typ is str:
        return parsed if isinstance(parsed, str) else val
    raise ConfigError(f"expected {typ.__name__}, got {val!r}", key, lineno)
