"""Tiny line-plot rasterizer writing 8-bit RGB PNG files (stdlib zlib only)."""

from __future__ import annotations

import struct
import zlib

import numpy as np

PALETTE = np.array([
    (31, 119, 180), (214, 39, 40), (44, 160, 44), (255, 127, 14),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (23, 190, 207),
], dtype=np.uint8)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload))


def encode_png(rgb: np.ndarray) -> bytes:
    """PNG bytes for an (H, W, 3) uint8 image."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    H, W, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(H))  # filter type 0 per row
    header = struct.pack(">IIBBBBB", W, H, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", header)
            + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b""))


def _draw_line(img, x0, y0, x1, y1, color):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    H, W, _ = img.shape
    ok = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    img[ys[ok], xs[ok]] = color


def line_plot(series: list[tuple[np.ndarray, np.ndarray]], width: int = 480, height: int = 300,
              margin: int = 20) -> np.ndarray:
    """Rasterize (x, y) series onto a white canvas with a grey frame.

    Non-finite points break the line. Axes are shared and autoscaled; there
    are no tick labels, the CSV is the quantitative output.
    """
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    grey = np.array([160, 160, 160], dtype=np.uint8)
    x0, x1, y0, y1 = margin, width - margin - 1, margin, height - margin - 1
    for a, b, c, d in ((x0, y0, x1, y0), (x0, y1, x1, y1), (x0, y0, x0, y1), (x1, y0, x1, y1)):
        _draw_line(img, a, b, c, d, grey)
    finite = [(np.asarray(x, float), np.asarray(y, float)) for x, y in series]
    pts = np.concatenate([x[np.isfinite(y)] for x, y in finite] or [np.zeros(0)])
    vals = np.concatenate([y[np.isfinite(y)] for _, y in finite] or [np.zeros(0)])
    if pts.size == 0 or vals.size == 0:
        return img
    xmin, xmax = float(pts.min()), float(pts.max())
    ymin, ymax = float(vals.min()), float(vals.max())
    xspan = xmax - xmin or 1.0
    yspan = ymax - ymin or 1.0
    for k, (x, y) in enumerate(finite):
        color = PALETTE[k % len(PALETTE)]
        px = x0 + (x - xmin) / xspan * (x1 - x0)
        py = y1 - (y - ymin) / yspan * (y1 - y0)
        for i in range(len(x) - 1):
            if np.isfinite(py[i]) and np.isfinite(py[i + 1]):
                _draw_line(img, px[i], py[i], px[i + 1], py[i + 1], color)
    return img


def write_line_plot(path, series, **kw) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(line_plot(series, **kw)))
