"""Desk-scale Vision Transformer with a 3-layer projector and ℓ²-normalized outputs."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from ._kernels import resize_axis_weights
from .views import PatchSequence


@dataclass(frozen=True)
class EncoderConfig:
    in_chans: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    proj_hidden: int = 128
    out_dim: int = 32
    max_grid: int = 8
    n_prototypes: int = 0  # >0 only for the DINO baseline head
    init_std: float = 0.02
    n_registers: int = 0
    layer_scale: float = 0.0  # initial per-channel residual gain; 0 disables layer scale
    drop_path: float = 0.0  # stochastic-depth rate of the last block, linear from 0
    pos_antialias: bool = False
    patch_head: bool = False  # separate projector for patch features (untied heads)

    @property
    def token_dim(self) -> int:
        return self.in_chans * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureBundle:
    z_cls: T.Tensor  # (d,) or (B, d)
    z_patch: T.Tensor  # (d, N) for a single view or (B, N, d)


class EncoderParams:
    """Ordered name -> Tensor map holding one copy (student or teacher) of the weights."""

    def __init__(self, cfg: EncoderConfig, tensors: dict[str, T.Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self, requires_grad: bool | None = None) -> "EncoderParams":
        out = {}
        for k, v in self.tensors.items():
            rg = v.requires_grad if requires_grad is None else requires_grad
            out[k] = T.Tensor(v.data.copy(), requires_grad=rg, name=k)
        return EncoderParams(self.cfg, out)

    def zero_grad(self) -> None:
        for v in self.tensors.values():
            v.grad = None

    def same_shapes(self, other: "EncoderParams") -> bool:
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape for k in self.tensors
        )

    @classmethod
    def from_arrays(cls, cfg: EncoderConfig, arrays: dict[str, np.ndarray],
                    requires_grad: bool = True) -> "EncoderParams":
        return cls(cfg, {k: T.Tensor(np.array(v, dtype=np.float64), requires_grad, name=k)
                         for k, v in arrays.items()})


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    e, D, std = cfg.embed_dim, cfg.token_dim, cfg.init_std
    hid = cfg.mlp_ratio * e
    a: dict[str, np.ndarray] = {
        "patch_embed.w": _trunc_normal(rng, (D, e), std),
        "patch_embed.b": np.zeros(e),
        "cls_token": _trunc_normal(rng, (e,), std),
        "pos_table": _trunc_normal(rng, (cfg.max_grid**2, e), std),
        "mask_token": _trunc_normal(rng, (D,), std),
    }
    if cfg.n_registers:
        a["registers"] = _trunc_normal(rng, (cfg.n_registers, e), std)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        a[p + "ln1.g"] = np.ones(e)
        a[p + "ln1.b"] = np.zeros(e)
        a[p + "qkv.w"] = _trunc_normal(rng, (e, 3 * e), std)
        a[p + "qkv.b"] = np.zeros(3 * e)
        a[p + "proj.w"] = _trunc_normal(rng, (e, e), std)
        a[p + "proj.b"] = np.zeros(e)
        a[p + "ln2.g"] = np.ones(e)
        a[p + "ln2.b"] = np.zeros(e)
        a[p + "fc1.w"] = _trunc_normal(rng, (e, hid), std)
        a[p + "fc1.b"] = np.zeros(hid)
        a[p + "fc2.w"] = _trunc_normal(rng, (hid, e), std)
        a[p + "fc2.b"] = np.zeros(e)
        if cfg.layer_scale:
            a[p + "ls1"] = np.full(e, cfg.layer_scale)
            a[p + "ls2"] = np.full(e, cfg.layer_scale)
    a["norm.g"] = np.ones(e)
    a["norm.b"] = np.zeros(e)
    dims = [e, cfg.proj_hidden, cfg.proj_hidden, cfg.out_dim]
    for head in ("head", "patch_head") if cfg.patch_head else ("head",):
        for j in range(3):
            a[f"{head}.{j}.w"] = _trunc_normal(rng, (dims[j], dims[j + 1]), std)
            a[f"{head}.{j}.b"] = np.zeros(dims[j + 1])
    if cfg.n_prototypes:
        a["prototypes"] = _trunc_normal(rng, (cfg.n_prototypes, cfg.out_dim), std)
    return EncoderParams.from_arrays(cfg, a)


@lru_cache(maxsize=32)
def _interp_matrix_1d(g: int, t: int, antialias: bool = False) -> np.ndarray:
    s = g / t
    if antialias and s > 1:
        # triangle filter stretched by the downscale factor, half-pixel centres
        centres = (np.arange(t) + 0.5) * s - 0.5
        R = np.maximum(0.0, 1.0 - np.abs(np.arange(g)[None, :] - centres[:, None]) / s)
        return R / R.sum(axis=1, keepdims=True)
    i0, i1, w1 = resize_axis_weights(g, t)
    R = np.zeros((t, g))
    R[np.arange(t), i0] += 1.0 - w1
    R[np.arange(t), i1] += w1
    return R


@lru_cache(maxsize=32)
def interpolation_matrix(g: int, t: int, antialias: bool = False) -> np.ndarray:
    """(t²×g²) bilinear map from a g×g grid to a t×t grid, raster order.

    With ``antialias`` a downscale uses a triangle filter whose support grows
    with the scale factor, so every source row contributes.
    """
    R = _interp_matrix_1d(g, t, antialias)
    M = np.kron(R, R)
    M.setflags(write=False)
    return M


def interpolate_positions(table, t: int, antialias: bool = False):
    """Bilinearly resample a (g², e) positional table to a t×t grid."""
    g = int(round(np.sqrt(table.shape[0])))
    if g * g != table.shape[0]:
        raise ValueError(f"positional table with {table.shape[0]} rows is not a square grid")
    if isinstance(table, T.Tensor):
        return table if t == g else T.matmul(T.Tensor(interpolation_matrix(g, t, antialias)), table)
    table = np.asarray(table, dtype=np.float64)
    return table if t == g else interpolation_matrix(g, t, antialias) @ table


def _linear(x: T.Tensor, params: EncoderParams, name: str) -> T.Tensor:
    return T.add(T.matmul(x, params[name + ".w"]), params[name + ".b"])


def _residual(x: T.Tensor, branch: T.Tensor, params: EncoderParams, gain: str,
              keep: np.ndarray | None) -> T.Tensor:
    if gain in params.tensors:
        branch = T.mul(branch, params[gain])
    if keep is not None:
        branch = T.mul(branch, T.Tensor(keep))
    return T.add(x, branch)


def drop_path_rates(cfg: EncoderConfig) -> np.ndarray:
    return np.linspace(0.0, cfg.drop_path, cfg.depth) if cfg.depth > 1 else np.array([cfg.drop_path])


def _keep_mask(rng, B: int, rate: float):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(B) >= rate).astype(np.float64)[:, None, None] / (1.0 - rate)


def _block(x: T.Tensor, params: EncoderParams, i: int, heads: int, rng=None, rate: float = 0.0) -> T.Tensor:
    p = f"blocks.{i}."
    B, L, e = x.shape
    hd = e // heads
    y = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    qkv = _linear(y, params, p + "qkv")
    qkv = T.transpose(T.reshape(qkv, (B, L, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.scale(T.matmul(q, k.T), 1.0 / np.sqrt(hd)), axis=-1)
    o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, e))
    x = _residual(x, _linear(o, params, p + "proj"), params, p + "ls1", _keep_mask(rng, B, rate))
    y = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    y = _linear(T.gelu(_linear(y, params, p + "fc1")), params, p + "fc2")
    return _residual(x, y, params, p + "ls2", _keep_mask(rng, B, rate))


def project(h: T.Tensor, params: EncoderParams, head: str = "head") -> T.Tensor:
    """3-layer projector followed by ℓ² normalization over the last axis."""
    h = T.gelu(_linear(h, params, head + ".0"))
    h = T.gelu(_linear(h, params, head + ".1"))
    return T.l2_normalize(_linear(h, params, head + ".2"), axis=-1)


def backbone(params: EncoderParams, tokens: np.ndarray, grid: int,
             mask: np.ndarray | None = None, positions: np.ndarray | None = None,
             drop_rng: np.random.Generator | None = None) -> T.Tensor:
    """Transformer output (B, 1+N, e) for a batch of (B, N, D) token arrays.

    Register tokens, if any, ride along through the blocks and are dropped
    from the output. ``drop_rng`` enables stochastic depth (student only).
    """
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.token_dim:
        raise ValueError(f"expected (B, N, {cfg.token_dim}) tokens, got {tokens.shape}")
    B, N, _ = tokens.shape
    x = T.Tensor(tokens)
    if mask is not None and np.any(mask):
        m = np.asarray(mask, dtype=np.float64)[..., None]
        x = T.add(T.Tensor(tokens * (1.0 - m)), T.mul(T.Tensor(m), params["mask_token"]))
    h = _linear(x, params, "patch_embed")
    pos = interpolate_positions(params["pos_table"], grid, cfg.pos_antialias)
    if positions is not None:
        pos = T.take(pos, np.asarray(positions)[:, 0] * grid + np.asarray(positions)[:, 1], axis=0)
    elif pos.shape[0] != N:
        raise ValueError(f"grid {grid} implies {grid * grid} tokens, got {N}")
    h = T.add(h, pos)
    cls = T.add(T.Tensor(np.zeros((B, 1, cfg.embed_dim))), params["cls_token"])
    R = cfg.n_registers
    if R:
        regs = T.add(T.Tensor(np.zeros((B, R, cfg.embed_dim))), params["registers"])
        x = T.concat([cls, regs, h], axis=1)
    else:
        x = T.concat([cls, h], axis=1)
    rates = drop_path_rates(cfg)
    for i in range(cfg.depth):
        x = _block(x, params, i, cfg.heads, drop_rng, float(rates[i]))
    if R:
        x = T.concat([x[:, :1], x[:, 1 + R:]], axis=1)
    return T.layer_norm(x, params["norm.g"], params["norm.b"])


def forward_batch(params: EncoderParams, tokens: np.ndarray, grid: int,
                  mask: np.ndarray | None = None, with_patches: bool = True,
                  positions: np.ndarray | None = None,
                  drop_rng: np.random.Generator | None = None) -> FeatureBundle:
    """Encode (B, N, D) tokens -> cls features (B, d) and patch features (B, N, d)."""
    x = backbone(params, tokens, grid, mask, positions, drop_rng)
    if not with_patches:
        return FeatureBundle(project(x[:, 0, :], params), None)
    if params.cfg.patch_head:
        return FeatureBundle(project(x[:, 0, :], params), project(x[:, 1:, :], params, "patch_head"))
    z = project(x, params)
    return FeatureBundle(z[:, 0, :], z[:, 1:, :])


def forward(params: EncoderParams, seq: PatchSequence) -> FeatureBundle:
    """Encode one view; returns z_cls (d,) and Z_patch (d, N)."""
    cfg = params.cfg
    if seq.D != cfg.token_dim:
        raise ValueError(f"token dimension {seq.D} does not match encoder input {cfg.token_dim}")
    if seq.N < 1:
        raise ValueError("empty token sequence")
    mask = seq.mask[None] if np.any(seq.mask) else None
    fb = forward_batch(params, seq.tokens.T[None], seq.grid, mask, True, seq.positions)
    return FeatureBundle(fb.z_cls[0], T.swap_last(fb.z_patch[0]))


def encode_numpy(params: EncoderParams, tokens: np.ndarray, grid: int, batch: int = 256) -> np.ndarray:
    """Cls features (M, d) without building a persistent graph."""
    frozen = params.copy(requires_grad=False)
    out = [forward_batch(frozen, tokens[i:i + batch], grid, with_patches=False).z_cls.data
           for i in range(0, tokens.shape[0], batch)]
    return np.concatenate(out, axis=0)
