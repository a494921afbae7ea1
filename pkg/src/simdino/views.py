"""Multi-crop views: crop sampling, bilinear resize, patchify, evaluation view, masking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import bilinear_resize

LOCAL_SCALE = (0.05, 0.4)
GLOBAL_SCALE = (0.4, 1.0)
ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class ViewSpec:
    kind: str  # "local" | "global" | "eval"
    crop_box: tuple[int, int, int, int]  # top, left, height, width
    target_size: int
    area_fraction: float

    def validate(self, image_hw: tuple[int, int], patch: int | None = None) -> None:
        H, W = image_hw
        top, left, h, w = self.crop_box
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
            raise ValueError(f"crop box {self.crop_box} outside {H}x{W} image")
        if patch is not None and self.target_size % patch:
            raise ValueError(f"patch size {patch} does not divide target size {self.target_size}")


@dataclass
class PatchSequence:
    """Tokens of one view as a D×N matrix in raster order."""

    tokens: np.ndarray
    grid: int
    mask: np.ndarray = field(default=None)
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        N = self.tokens.shape[1]
        if self.mask is None:
            self.mask = np.zeros(N, dtype=np.int64)
        if self.positions is None:
            idx = np.arange(N)
            self.positions = np.stack([idx // self.grid, idx % self.grid], axis=1)

    @property
    def D(self) -> int:
        return self.tokens.shape[0]

    @property
    def N(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class ViewConfig:
    patch_size: int = 4
    global_size: int = 32
    local_size: int = 16
    n_global: int = 2
    n_local: int = 6
    global_scale: tuple[float, float] = GLOBAL_SCALE
    local_scale: tuple[float, float] = LOCAL_SCALE
    aspect: tuple[float, float] = ASPECT_RANGE
    eval_short_edge: int = 36
    eval_size: int = 32


def sample_view(image_hw, kind: str, rng: np.random.Generator, target_size: int,
                scale: tuple[float, float] | None = None,
                aspect: tuple[float, float] = ASPECT_RANGE) -> ViewSpec:
    """Draw a crop covering a uniform-random fraction p of the image area."""
    H, W = image_hw[-2:]
    if scale is None:
        scale = GLOBAL_SCALE if kind == "global" else LOCAL_SCALE
    lo, hi = scale
    if min(H, W) < 1 or lo * H * W < 1.0:
        raise ValueError(f"image {H}x{W} too small for minimum crop fraction {lo}")
    p = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    a = float(rng.uniform(*aspect)) if aspect[1] > aspect[0] else float(aspect[0])
    area = p * H * W
    w = math.sqrt(area * a)
    h = math.sqrt(area / a)
    if w > W:
        w, h = W, area / W
    if h > H:
        h, w = H, min(W, area / H)
    h = int(min(H, max(1, round(h))))
    w = int(min(W, max(1, round(w))))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return ViewSpec(kind, (top, left, h, w), int(target_size), p)


def patchify(img: np.ndarray, P: int) -> np.ndarray:
    """C×S×S image -> D×N tokens, channel-major unrolling, raster order."""
    C, S, S2 = img.shape
    if S != S2 or S % P:
        raise ValueError(f"patch size {P} does not divide image size {S}x{S2}")
    g = S // P
    t = img.reshape(C, g, P, g, P).transpose(1, 3, 0, 2, 4).reshape(g * g, C * P * P)
    return np.ascontiguousarray(t.T)


def unpatchify(tokens: np.ndarray, positions: np.ndarray, C: int, P: int, grid: int) -> np.ndarray:
    img = np.zeros((C, grid * P, grid * P))
    for k, (r, c) in enumerate(positions):
        img[:, r * P:(r + 1) * P, c * P:(c + 1) * P] = tokens[:, k].reshape(C, P, P)
    return img


def crop_and_resize(image: np.ndarray, spec: ViewSpec) -> np.ndarray:
    top, left, h, w = spec.crop_box
    return bilinear_resize(image[:, top:top + h, left:left + w], spec.target_size, spec.target_size)


def apply_view(image: np.ndarray, spec: ViewSpec, P: int) -> PatchSequence:
    spec.validate(image.shape[-2:], P)
    S = spec.target_size
    return PatchSequence(patchify(crop_and_resize(image, spec), P), S // P)


def eval_view(image: np.ndarray, L_eval: int, S_eval: int, P: int) -> PatchSequence:
    """Resize so the short edge is ``L_eval``, centre-crop S_eval×S_eval, patchify."""
    if S_eval > L_eval:
        raise ValueError(f"eval crop {S_eval} larger than short edge {L_eval}")
    if S_eval % P:
        raise ValueError(f"patch size {P} does not divide eval size {S_eval}")
    C, H, W = image.shape
    if H <= W:
        nh, nw = L_eval, max(L_eval, int(round(W * L_eval / H)))
    else:
        nh, nw = max(L_eval, int(round(H * L_eval / W))), L_eval
    resized = bilinear_resize(image, nh, nw)
    top = (nh - S_eval) // 2
    left = (nw - S_eval) // 2
    crop = resized[:, top:top + S_eval, left:left + S_eval]
    return PatchSequence(patchify(crop, P), S_eval // P)


def mask_count(fraction: float, N: int) -> int:
    # guard against 0.3*10 = 3.0000000000000004 style rounding
    return int(min(N, math.ceil(fraction * N - 1e-9)))


def apply_mask(seq: PatchSequence, mask_fraction: float, mask_token: np.ndarray,
               rng: np.random.Generator) -> PatchSequence:
    """Replace ⌈fraction·N⌉ distinct uniformly chosen tokens with ``mask_token``."""
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError(f"mask fraction must lie in [0, 1], got {mask_fraction}")
    mask_token = np.asarray(getattr(mask_token, "data", mask_token), dtype=np.float64).reshape(-1)
    if mask_token.shape[0] != seq.D:
        raise ValueError(f"mask token length {mask_token.shape[0]} != token dimension {seq.D}")
    k = mask_count(mask_fraction, seq.N)
    chosen = rng.choice(seq.N, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    indicator = np.zeros(seq.N, dtype=np.int64)
    indicator[chosen] = 1
    tokens = seq.tokens.copy()
    tokens[:, indicator == 1] = mask_token[:, None]
    return replace(seq, tokens=tokens, mask=indicator, positions=seq.positions.copy())


@dataclass
class ViewBatch:
    """All views of a minibatch, grouped by kind for batched encoding.

    ``global_tokens`` has shape (n_global, B, N_glo, D); ``local_tokens``
    (n_local, B, N_loc, D). ``global_mask`` marks masked tokens of the
    student copy of each global view.
    """

    global_tokens: np.ndarray
    local_tokens: np.ndarray
    global_grid: int
    local_grid: int
    global_mask: np.ndarray
    local_mask: np.ndarray
    specs: list


def make_views(images: np.ndarray, cfg: ViewConfig, rng: np.random.Generator,
               mask_prob: float = 0.0, mask_ratio: tuple[float, float] = (0.1, 0.5),
               mask_locals: bool = False) -> ViewBatch:
    """Sample ``n_global`` + ``n_local`` views per image and optional masks.

    Each student global view (and local view if ``mask_locals``) is masked
    with probability ``mask_prob`` at a ratio drawn uniformly from
    ``mask_ratio``. Teachers read the unmasked global tokens.
    """
    B = images.shape[0]
    P = cfg.patch_size
    glob, loc, specs = [], [], []
    for v in range(cfg.n_global):
        toks = []
        for b in range(B):
            s = sample_view(images[b].shape, "global", rng, cfg.global_size, cfg.global_scale, cfg.aspect)
            specs.append((b, v, s))
            toks.append(apply_view(images[b], s, P).tokens.T)
        glob.append(np.stack(toks))
    for v in range(cfg.n_local):
        toks = []
        for b in range(B):
            s = sample_view(images[b].shape, "local", rng, cfg.local_size, cfg.local_scale, cfg.aspect)
            specs.append((b, cfg.n_global + v, s))
            toks.append(apply_view(images[b], s, P).tokens.T)
        loc.append(np.stack(toks))
    ng = (cfg.global_size // P) ** 2
    nl = (cfg.local_size // P) ** 2
    D = images.shape[1] * P * P
    global_tokens = np.stack(glob) if glob else np.zeros((0, B, ng, D))
    local_tokens = np.stack(loc) if loc else np.zeros((0, B, nl, D))
    gmask = _draw_masks(rng, (cfg.n_global, B), ng, mask_prob, mask_ratio)
    lmask = _draw_masks(rng, (cfg.n_local, B), nl, mask_prob if mask_locals else 0.0, mask_ratio)
    return ViewBatch(global_tokens, local_tokens, cfg.global_size // P, cfg.local_size // P, gmask, lmask, specs)


def _draw_masks(rng, lead, N, prob, ratio):
    out = np.zeros(lead + (N,), dtype=np.int64)
    if prob <= 0.0:
        return out
    for idx in np.ndindex(*lead):
        if rng.random() < prob:
            k = mask_count(float(rng.uniform(*ratio)), N)
            out[idx + (rng.choice(N, size=k, replace=False),)] = 1
    return out
