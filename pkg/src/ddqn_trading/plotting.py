"""Dependency-free SVG line charts for metrics and evaluation curves."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _fmt(v: float) -> str:
    if v == 0 or 1e-3 <= abs(v) < 1e5:
        return f"{v:.4g}"
    return f"{v:.2e}"


def line_panel(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    x0: float = 0,
    y0: float = 0,
    width: float = 640,
    height: float = 320,
) -> list[str]:
    """SVG elements for one chart; ``series`` holds (label, xs, ys) triples."""
    left, right, top, bottom = 70, 20, 30, 45
    pw, ph = width - left - right, height - top - bottom
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if math.isfinite(y)]
    xs_all = [p[0] for p in pts] or [0.0, 1.0]
    ys_all = [p[1] for p in pts] or [0.0, 1.0]
    xmin, xmax = min(xs_all), max(xs_all)
    ymin, ymax = min(ys_all), max(ys_all)
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymin, ymax = ymin - 1, ymax + 1

    def sx(x):
        return x0 + left + (x - xmin) / (xmax - xmin) * pw

    def sy(y):
        return y0 + top + (ymax - y) / (ymax - ymin) * ph

    out = [
        f'<text x="{x0 + width / 2:.1f}" y="{y0 + 18:.1f}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{x0 + left}" y="{y0 + top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for t in _ticks(ymin, ymax):
        y = sy(t)
        out.append(f'<line x1="{x0 + left}" x2="{x0 + left + pw}" y1="{y:.1f}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{x0 + left - 5}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{_fmt(t)}</text>')
    for t in _ticks(xmin, xmax):
        x = sx(t)
        out.append(f'<text x="{x:.1f}" y="{y0 + top + ph + 15}" text-anchor="middle" font-size="10">{_fmt(t)}</text>')
    if ymin < 0 < ymax:
        out.append(f'<line x1="{x0 + left}" x2="{x0 + left + pw}" y1="{sy(0):.1f}" y2="{sy(0):.1f}" stroke="#888" stroke-dasharray="4 3"/>')
    out.append(f'<text x="{x0 + left + pw / 2:.1f}" y="{y0 + height - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(
        f'<text x="{x0 + 15}" y="{y0 + top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 {x0 + 15} {y0 + top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        if coords:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(
            f'<text x="{x0 + left + 8}" y="{y0 + top + 14 + 14 * i}" font-size="11" fill="{color}">{escape(label)}</text>'
        )
    return out


def svg_document(panels: list[list[str]], width: float = 640, panel_height: float = 320) -> str:
    height = panel_height * len(panels)
    body = [el for elements in panels for el in elements]
    return (
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n"
    )


def metrics_svg(rows: list[dict]) -> str:
    """Per-episode reward plus its running total, from a metrics CSV."""
    episodes = [float(r["episode_index"]) for r in rows]
    rewards = [float(r["cumulative_reward_pct"]) for r in rows]
    running, acc = [], 0.0
    for r in rewards:
        acc += r
        running.append(acc)
    top = line_panel([("episode reward", episodes, rewards)], "Reward per episode", "episode", "reward %")
    bottom = line_panel([("cumulative", episodes, running)], "Cumulative reward", "episode", "reward %", y0=320)
    return svg_document([top, bottom])


def curve_svg(rows: list[dict], label: str = "cumulative reward") -> str:
    """Cumulative-reward curve from an evaluation curve CSV."""
    steps = [float(r["step"]) for r in rows]
    values = [float(r["cumulative_reward_pct"]) for r in rows]
    return svg_document([line_panel([(label, steps, values)], "Testing cumulative reward", "step", "reward %")])
