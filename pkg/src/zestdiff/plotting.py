"""Tiny raster plotting helpers; everything lands in PPM files."""

from __future__ import annotations

import numpy as np

from .imageio import write_ppm

# 3x5 glyphs for digits and a few symbols, rows top-down, bits left-to-right
_GLYPHS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001001001001", "8": "111101111101111",
    "9": "111101111001111", ".": "000000000000010", "-": "000000111000000",
    " ": "000000000000000",
}


def _draw_text(canvas, y, x, txt, color=(0, 0, 0), scale=1):
    for ch in txt:
        bits = _GLYPHS.get(ch)
        if bits is None:
            continue
        for r in range(5):
            for c in range(3):
                if bits[r * 3 + c] == "1":
                    ys = y + r * scale
                    xs = x + c * scale
                    canvas[ys:ys + scale, xs:xs + scale] = color
        x += 4 * scale
    return x


def bar_chart(path, labels, values, errors=None, title_vals=True,
              width=360, height=220) -> None:
    """Bar chart of values in [0,1]-ish range with optional error bars."""
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    vmax = max(max(values), 1e-9)
    top, bottom, left = 20, height - 30, 30
    span = bottom - top
    nb = len(values)
    slot = (width - left - 10) // max(nb, 1)
    bw = max(slot - 12, 6)
    canvas[bottom, left - 4:width - 6] = (0, 0, 0)
    canvas[top:bottom + 1, left - 4] = (0, 0, 0)
    for i, v in enumerate(values):
        h = int(round(span * v / (vmax * 1.15)))
        x0 = left + i * slot + 6
        canvas[bottom - h:bottom, x0:x0 + bw] = (70, 110, 200)
        if errors is not None:
            e = int(round(span * errors[i] / (vmax * 1.15)))
            cx = x0 + bw // 2
            canvas[max(top, bottom - h - e):min(bottom, bottom - h + e + 1),
                   cx] = (200, 60, 60)
        if title_vals:
            _draw_text(canvas, bottom - h - 8, x0, f"{v:.2f}"[:5])
        _draw_text(canvas, bottom + 4, x0, str(labels[i])[:7].replace("_", " "))
    write_ppm(path, canvas)


def line_plot(path, ys, width=400, height=160) -> None:
    """Single-series line plot (e.g. per-step loss)."""
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    ys = np.asarray([y for y in ys if y is not None and np.isfinite(y)],
                    dtype=np.float64)
    if ys.size == 0:
        write_ppm(path, canvas)
        return
    lo, hi = float(ys.min()), float(ys.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    top, bottom, left, right = 10, height - 20, 30, width - 10
    canvas[bottom, left:right] = (0, 0, 0)
    canvas[top:bottom + 1, left] = (0, 0, 0)
    n = ys.size
    for i in range(n):
        x = left + int(round((right - left - 1) * (i / max(n - 1, 1))))
        y = bottom - int(round((bottom - top - 1) * (ys[i] - lo) / (hi - lo)))
        canvas[max(y - 1, 0):y + 1, max(x - 1, 0):x + 1] = (190, 60, 60)
    _draw_text(canvas, top, left + 4, f"{hi:.3f}"[:7])
    _draw_text(canvas, bottom - 7, left + 4, f"{lo:.3f}"[:7])
    write_ppm(path, canvas)


def _edge(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    core = m.copy()
    core[1:, :] &= m[:-1, :]
    core[:-1, :] &= m[1:, :]
    core[:, 1:] &= m[:, :-1]
    core[:, :-1] &= m[:, 1:]
    return m & ~core


def overlay_strip(path, estimates_by_step, mask, scale: int = 6) -> None:
    """One row per trace: the mask tile then per-step estimate heatmaps,
    mask boundary burned in red."""
    h, w = mask.shape
    tiles = []
    mask_tile = np.zeros((h, w, 3), dtype=np.uint8)
    mask_tile[..., 1] = (mask * 255).astype(np.uint8)
    tiles.append(mask_tile)
    edge = _edge(mask >= 0.5)
    for est in estimates_by_step:
        e = est / max(float(est.max()), 1e-9)
        tile = np.stack([(e * 255)] * 3, axis=-1).astype(np.uint8)
        tile[edge] = (255, 40, 40)
        tiles.append(tile)
    strip = np.concatenate(tiles, axis=1)
    strip = strip.repeat(scale, axis=0).repeat(scale, axis=1)
    write_ppm(path, strip)
