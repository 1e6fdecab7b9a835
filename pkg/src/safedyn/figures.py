"""Minimal deterministic SVG charts, each with a sibling CSV of the plotted numbers."""

from __future__ import annotations

import csv
import math
import os
import warnings

import numpy as np

__all__ = ["line_chart", "bar_chart", "emit_figures"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
W, H, PAD = 640, 400, 60


def _f(v):
    return f"{v:.2f}"


def _scale(lo, hi, a, b):
    if not hi > lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _ticks(lo, hi, count=5):
    return np.linspace(lo, hi, count)


def _frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi, sx, sy):
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">{xlabel}</text>',
           f'<text x="15" y="{H / 2}" text-anchor="middle" '
           f'transform="rotate(-90 15 {H / 2})">{ylabel}</text>']
    for v in _ticks(ylo, yhi):
        out.append(f'<text x="{PAD - 5}" y="{_f(sy(v) + 4)}" text-anchor="end">{v:.3g}</text>')
    if xlo is not None:
        for v in _ticks(xlo, xhi):
            out.append(f'<text x="{_f(sx(v))}" y="{H - PAD + 15}" text-anchor="middle">'
                       f'{v:.3g}</text>')
    return out


def _write(path, parts):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(parts + ["</svg>"]) + "\n")


def _finite_range(arrays):
    v = np.concatenate([np.asarray(a, float).ravel() for a in arrays])
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    return (lo, hi) if hi > lo else (lo - 0.5, hi + 0.5)


def line_chart(path, series, title="", xlabel="", ylabel="", vlines=()):
    """Write ``path`` (SVG) and ``path`` with ``.csv`` holding ``series``.

    ``series`` maps a label to ``(x, y)``; the CSV is long-format
    ``series,x,y`` with exactly one row per polyline vertex.
    """
    xs = [np.asarray(x, float) for x, _ in series.values()]
    ys = [np.asarray(y, float) for _, y in series.values()]
    xlo, xhi = _finite_range(xs)
    ylo, yhi = _finite_range(ys)
    sx = _scale(xlo, xhi, PAD, W - PAD)
    sy = _scale(ylo, yhi, H - PAD, PAD)
    parts = _frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi, sx, sy)
    for v in vlines:
        parts.append(f'<line class="marker" x1="{_f(sx(v))}" y1="{PAD}" x2="{_f(sx(v))}" '
                     f'y2="{H - PAD}" stroke="gray" stroke-dasharray="4 3"/>')
    rows = []
    for i, (label, (x, y)) in enumerate(series.items()):
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{_f(sx(a))},{_f(sy(b))}" for a, b in zip(x[ok], y[ok]))
        c = PALETTE[i % len(PALETTE)]
        parts.append(f'<polyline data-series="{label}" fill="none" stroke="{c}" '
                     f'stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{W - PAD + 5 - 120}" y="{PAD + 14 * i}" fill="{c}">{label}</text>')
        rows.extend((label, repr(float(a)), repr(float(b))) for a, b in zip(x[ok], y[ok]))
    _write(path, parts)
    _csv(os.path.splitext(path)[0] + ".csv", ("series", "x", "y"), rows)


def bar_chart(path, labels, values, errors=None, title="", ylabel=""):
    """Bars with optional symmetric error whiskers; sibling CSV ``label,value,error``."""
    values = np.asarray(values, float)
    errors = np.zeros_like(values) if errors is None else np.asarray(errors, float)
    top = values + errors
    yhi = float(np.max(top[np.isfinite(top)])) if np.isfinite(top).any() else 1.0
    yhi = yhi if yhi > 0 else 1.0
    sy = _scale(0.0, yhi * 1.1, H - PAD, PAD)
    parts = _frame(title, "", ylabel, None, None, 0.0, yhi * 1.1, None, sy)
    slot = (W - 2 * PAD) / max(1, len(labels))
    for i, (lab, v, e) in enumerate(zip(labels, values, errors)):
        x0 = PAD + slot * (i + 0.15)
        bw = slot * 0.7
        if math.isfinite(v):
            parts.append(f'<rect data-label="{lab}" x="{_f(x0)}" y="{_f(sy(v))}" width="{_f(bw)}" '
                         f'height="{_f(sy(0.0) - sy(v))}" fill="{PALETTE[i % len(PALETTE)]}"/>')
            if e > 0:
                xc = x0 + bw / 2
                parts.append(f'<line x1="{_f(xc)}" y1="{_f(sy(v - e))}" x2="{_f(xc)}" '
                             f'y2="{_f(sy(v + e))}" stroke="black"/>')
        parts.append(f'<text x="{_f(x0 + bw / 2)}" y="{H - PAD + 15}" text-anchor="middle">'
                     f'{lab}</text>')
    _write(path, parts)
    _csv(os.path.splitext(path)[0] + ".csv", ("label", "value", "error"),
         [(l, repr(float(v)), repr(float(e))) for l, v, e in zip(labels, values, errors)])


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\r\n")
        wr.writerow(header)
        wr.writerows(rows)


def emit_figures(out, reports):
    """Render every figure in ``reports`` (a dict name -> spec) into ``out``.

    Each spec is ``{"kind": "line", "series": ..., ...}`` or
    ``{"kind": "bar", "labels": ..., "values": ..., ...}``. Returns the
    written SVG paths.
    """
    if not reports:
        warnings.warn("no reports to render; nothing written")
        return []
    os.makedirs(out, exist_ok=True)
    paths = []
    for name, spec in reports.items():
        spec = dict(spec)
        kind = spec.pop("kind")
        p = os.path.join(out, f"{name}.svg")
        if kind == "line":
            line_chart(p, **spec)
        elif kind == "bar":
            bar_chart(p, **spec)
        else:
            raise ValueError(f"unknown figure kind {kind!r}")
        paths.append(p)
    return paths
