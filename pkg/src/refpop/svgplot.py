"""Small hand-rolled SVG 1.1 writers for the report artifacts."""

from __future__ import annotations

import numpy as np

_HEADER = ('<?xml version="1.0" encoding="UTF-8"?>\n'
           '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
           'width="{w}" height="{h}" viewBox="0 0 {w} {h}">\n'
           '<!-- config_hash={hash} -->\n'
           '<rect width="{w}" height="{h}" fill="white"/>\n')


def _text(x, y, s, size=12, anchor="middle"):
    return (f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}">{s}</text>\n')


def _color(v):
    # blue (0) -> yellow-ish (1)
    v = min(max(float(v), 0.0), 1.0)
    r = int(40 + 215 * v)
    g = int(60 + 170 * v)
    b = int(160 - 120 * v)
    return f"rgb({r},{g},{b})"


def heatmap_svg(path, matrix: np.ndarray, title: str, config_hash: str = "",
                vmin: float = 0.0, vmax: float = 1.0) -> None:
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    cell = 48
    margin = 60
    w = margin * 2 + cell * n + 40
    h = margin * 2 + cell * n
    parts = [_HEADER.format(w=w, h=h, hash=config_hash)]
    parts.append(_text(w / 2, 24, title, size=14))
    span = max(vmax - vmin, 1e-9)
    for i in range(n):
        for j in range(n):
            v = (matrix[i, j] - vmin) / span
            x = margin + j * cell
            y = margin + i * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{_color(v)}" stroke="white"/>\n')
            parts.append(_text(x + cell / 2, y + cell / 2 + 4,
                               f"{matrix[i, j]:.2f}", size=10))
        parts.append(_text(margin - 10, margin + i * cell + cell / 2 + 4,
                           f"S{i}", size=10, anchor="end"))
        parts.append(_text(margin + i * cell + cell / 2, margin - 8,
                           f"L{i}", size=10))
    parts.append("</svg>\n")
    with open(path, "w") as f:
        f.write("".join(parts))


def line_band_svg(path, xs, mean, low, high, title: str,
                  config_hash: str = "") -> None:
    w, h = 520, 320
    margin = 50
    parts = [_HEADER.format(w=w, h=h, hash=config_hash)]
    parts.append(_text(w / 2, 24, title, size=14))
    xs = np.asarray(xs, dtype=float)
    mean = np.asarray(mean, dtype=float)
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    x0, x1 = xs.min(), max(xs.max(), xs.min() + 1e-9)
    y0, y1 = 0.0, max(1.0, high.max())

    def sx(x):
        return margin + (x - x0) / (x1 - x0) * (w - 2 * margin)

    def sy(y):
        return h - margin - (y - y0) / (y1 - y0) * (h - 2 * margin)

    band = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, high))
    band += " " + " ".join(f"{sx(x):.1f},{sy(y):.1f}"
                           for x, y in zip(xs[::-1], low[::-1]))
    parts.append(f'<polygon points="{band}" fill="rgb(200,215,245)" stroke="none"/>\n')
    line = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, mean))
    parts.append(f'<polyline points="{line}" fill="none" '
                 f'stroke="rgb(40,80,180)" stroke-width="2"/>\n')
    for frac in (0.0, 0.5, 1.0):
        y = y0 + frac * (y1 - y0)
        parts.append(_text(margin - 6, sy(y) + 4, f"{y:.1f}", size=10, anchor="end"))
    parts.append(_text(w / 2, h - 12, "outer iteration", size=11))
    parts.append("</svg>\n")
    with open(path, "w") as f:
        f.write("".join(parts))


def bar_chart_svg(path, labels, means, stds, title: str,
                  config_hash: str = "") -> None:
    w, h = 560, 320
    margin = 50
    n = len(labels)
    parts = [_HEADER.format(w=w, h=h, hash=config_hash)]
    parts.append(_text(w / 2, 24, title, size=14))
    top = max(max(m + s for m, s in zip(means, stds)), 1.0)
    slot = (w - 2 * margin) / max(n, 1)
    bar_w = slot * 0.6
    for i, (label, m, s) in enumerate(zip(labels, means, stds)):
        x = margin + i * slot + (slot - bar_w) / 2
        bh = m / top * (h - 2 * margin)
        y = h - margin - bh
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                     f'height="{bh:.1f}" fill="rgb(90,130,200)"/>\n')
        if s > 0:
            cx = x + bar_w / 2
            y_lo = h - margin - (m - s) / top * (h - 2 * margin)
            y_hi = h - margin - (m + s) / top * (h - 2 * margin)
            parts.append(f'<line x1="{cx:.1f}" y1="{y_lo:.1f}" x2="{cx:.1f}" '
                         f'y2="{y_hi:.1f}" stroke="black" stroke-width="1.5"/>\n')
        parts.append(_text(x + bar_w / 2, h - margin + 16, label, size=10))
        parts.append(_text(x + bar_w / 2, y - 6, f"{m:.2f}", size=10))
    parts.append("</svg>\n")
    with open(path, "w") as f:
        f.write("".join(parts))
