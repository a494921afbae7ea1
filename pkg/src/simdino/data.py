"""Synthetic blob images and the raw on-disk dataset format.

Each image is stored as ``images/NNNNNN.bin``: three little-endian uint32
(C, H, W) followed by C·H·W little-endian float64 pixels in [0, 1], C-order.
``manifest.tsv`` lists ``path<TAB>label<TAB>split`` with a header row.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "ring", "cross", "diamond", "bar")
MANIFEST = "manifest.tsv"
_HEADER = struct.Struct("<3I")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_classes: int = 3
    per_class: int = 100
    image_size: int = 64
    noise: float = 0.05
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n_classes < 1 or self.per_class < 1:
            raise ValueError("need at least one class and one image per class")
        if self.image_size < 8:
            raise ValueError(f"image size {self.image_size} too small")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def class_color(self, k: int) -> tuple[float, float, float]:
        return colorsys.hsv_to_rgb(k / self.n_classes, 0.85, 0.9)

    def class_shape(self, k: int) -> str:
        return SHAPES[k % len(SHAPES)]


@dataclass
class Dataset:
    images: np.ndarray  # (M, C, H, W)
    labels: np.ndarray  # (M,)
    split: np.ndarray  # (M,) of "train" / "val"
    paths: list = field(default_factory=list)

    def indices(self, split: str) -> np.ndarray:
        return np.nonzero(self.split == split)[0]

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]

    def __len__(self) -> int:
        return len(self.labels)


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.2
    if shape == "bar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r * 1.1)
    raise ValueError(f"unknown shape {shape!r}")


def render_image(spec: SyntheticDatasetSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    bg = rng.uniform(0.2, 0.5) + rng.uniform(-0.05, 0.05, size=3)
    img = np.broadcast_to(bg[:, None, None], (3, S, S)).copy()
    color = np.asarray(spec.class_color(label))
    shape = spec.class_shape(label)
    for _ in range(int(rng.integers(1, 3))):
        r = rng.uniform(0.15, 0.3) * S
        cy, cx = rng.uniform(r, S - r, size=2)
        m = _shape_mask(shape, yy, xx, cy, cx, r)
        tint = np.clip(color + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        img[:, m] = tint[:, None]
    if spec.noise > 0:
        img += spec.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    images, labels, split = [], [], []
    for k in range(spec.n_classes):
        n_train = int(round(spec.train_fraction * spec.per_class))
        order = rng.permutation(spec.per_class)
        for i in range(spec.per_class):
            images.append(render_image(spec, k, rng))
            labels.append(k)
            split.append("train" if order[i] < n_train else "val")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), np.asarray(split))


def write_image(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f8")
    C, H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(C, H, W))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated image header")
    C, H, W = _HEADER.unpack_from(raw)
    n = C * H * W
    if len(raw) != _HEADER.size + 8 * n:
        raise ValueError(f"{path}: expected {n} pixels for shape {(C, H, W)}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(C, H, W).astype(np.float64)


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = ["path\tlabel\tsplit"]
    for i, img in enumerate(ds.images):
        rel = f"images/{i:06d}.bin"
        write_image(out / rel, img)
        rows.append(f"{rel}\t{int(ds.labels[i])}\t{ds.split[i]}")
    (out / MANIFEST).write_text("\n".join(rows) + "\n")
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].split("\t") != ["path", "label", "split"]:
        raise ValueError(f"{manifest}: bad header")
    paths, labels, split, images = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("train", "val"):
            raise ValueError(f"{manifest}:{lineno}: malformed row {line!r}")
        paths.append(parts[0])
        labels.append(int(parts[1]))
        split.append(parts[2])
        images.append(read_image(root / parts[0]))
    if not images:
        raise ValueError(f"{manifest}: dataset is empty")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), np.asarray(split), paths)
