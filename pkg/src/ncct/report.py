"""Static report artifacts: confusion-matrix tables and SVG line plots."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def confusion_text(cm: np.ndarray, class_names: Sequence[str] | None = None) -> str:
    """Right-aligned text table, rows = true class, columns = predicted."""
    c = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(c)]
    if len(names) != c:
        raise ValueError(f"{len(names)} class names for a {c}-class matrix")
    corner = "true\\pred"
    width = max(len(corner), *(len(n) for n in names), *(len(str(int(v))) for v in cm.ravel()))
    lines = [" ".join(s.rjust(width) for s in [corner, *names])]
    for name, row in zip(names, cm):
        lines.append(" ".join(s.rjust(width) for s in [name, *(str(int(v)) for v in row)]))
    return "\n".join(lines) + "\n"


def confusion_csv(cm: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true"] + [f"pred_{j}" for j in range(cm.shape[1])])
    for i, row in enumerate(cm):
        w.writerow([i] + [int(v) for v in row])
    return buf.getvalue()


def read_confusion_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def line_plot_svg(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
                  width: int = 560, height: int = 360) -> str:
    """A self-contained SVG line chart with axes, ticks and a legend."""
    if not series:
        raise ValueError("need at least one series")
    xs = [float(v) for s in series for v in s.x]
    ys = [float(v) for s in series for v in s.y if math.isfinite(float(v))]
    if not xs or not ys:
        raise ValueError("series contain no finite points")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = 60, 150, 36, 48
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.1f}" y1="{top + ph}" x2="{sx(t):.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{sy(t):.1f}" x2="{left}" y2="{sy(t):.1f}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{sy(t):.1f}" x2="{left + pw}" y2="{sy(t):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 7}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(float(a), float(b)) for a, b in zip(s.x, s.y) if math.isfinite(float(b))]
        path = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in pts)
        out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{path}">'
                   f"<title>{escape(s.label)}</title></polyline>")
        for a, b in pts:
            out.append(f'<circle cx="{sx(a):.1f}" cy="{sy(b):.1f}" r="2.5" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def accuracy_curve_svg(epochs: Sequence[int], accuracies: Sequence[float], label: str = "test accuracy") -> str:
    return line_plot_svg([Series(label, epochs, accuracies)], "Test accuracy by epoch", "epoch", "accuracy")


def k_sweep_svg(rows) -> str:
    """One last5_mean-vs-k curve per (mode, noise kind, noise rate) group, averaged over seeds."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.mode, r.noise_kind, r.noise_rate), []).append(r)
    series = []
    for (mode, kind, rate), rs in sorted(groups.items()):
        by_k: dict[int, list[float]] = {}
        for r in rs:
            by_k.setdefault(r.k, []).append(r.last5_mean)
        ks = sorted(by_k)
        label = f"{kind} {rate:g}" if len({g[0] for g in groups}) == 1 else f"{mode} {kind} {rate:g}"
        series.append(Series(label, ks, [float(np.mean(by_k[k])) for k in ks]))
    return line_plot_svg(series, "Accuracy by number of negative classes k", "k", "last-5 mean accuracy")
