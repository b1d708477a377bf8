"""Dependency-free SVG line charts for run metrics.

Charts are plain hand-written SVG so outputs stay small, deterministic, and
diff-able.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

PALETTE = [
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#ff7f0e",
    "#9467bd",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
]


@dataclass(frozen=True)
class ChartSeries:
    label: str
    xs: list[float]
    ys: list[float]


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    magnitude = 10 ** int(f"{raw:e}".split("e")[1])
    for mult in (1, 2, 2.5, 5, 10):
        step = mult * magnitude
        if step >= raw:
            break
    start = step * (lo // step)
    ticks = []
    t = start
    while t <= hi + 1e-12:
        if t >= lo - 1e-12:
            ticks.append(round(t, 10))
        t += step
    return ticks


def render_line_chart(
    series: list[ChartSeries],
    title: str,
    x_label: str,
    y_label: str,
    width: int = 760,
    height: int = 440,
) -> str:
    """Render overlaid line series with axes, ticks, and a legend."""
    plotted = [s for s in series if s.xs]
    margin_l, margin_r, margin_t, margin_b = 64, 24, 42, 48
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    if plotted:
        x_lo = min(min(s.xs) for s in plotted)
        x_hi = max(max(s.xs) for s in plotted)
        y_lo = min(min(s.ys) for s in plotted)
        y_hi = max(max(s.ys) for s in plotted)
    else:
        x_lo, x_hi, y_lo, y_hi = 0.0, 1.0, 0.0, 1.0
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = 0.05 * (y_hi - y_lo) or 0.05
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        return margin_l + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return margin_t + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<rect x="{margin_l}" y="{margin_t}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#444"/>',
    ]
    for t in _nice_ticks(x_lo, x_hi):
        x = sx(t)
        parts.append(f'<line x1="{x:.1f}" y1="{margin_t + plot_h}" x2="{x:.1f}" '
                     f'y2="{margin_t + plot_h + 5}" stroke="#444"/>')
        parts.append(f'<text x="{x:.1f}" y="{margin_t + plot_h + 18}" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        y = sy(t)
        parts.append(f'<line x1="{margin_l - 5}" y1="{y:.1f}" x2="{margin_l}" y2="{y:.1f}" stroke="#444"/>')
        parts.append(f'<line x1="{margin_l}" y1="{y:.1f}" x2="{margin_l + plot_w}" y2="{y:.1f}" '
                     f'stroke="#ddd" stroke-width="0.5"/>')
        parts.append(f'<text x="{margin_l - 8}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    parts.append(
        f'<text x="{margin_l + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="18" y="{margin_t + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {margin_t + plot_h / 2:.1f})">{y_label}</text>'
    )
    for i, s in enumerate(plotted):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(s.xs, s.ys))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.6"/>')
    legend_y = margin_t + 8
    for i, s in enumerate(plotted):
        color = PALETTE[i % len(PALETTE)]
        y = legend_y + 18 * i
        x = margin_l + plot_w - 150
        parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 22}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x + 28}" y="{y + 4}">{s.label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_chart(series: list[ChartSeries], title: str, x_label: str, y_label: str, path: str | Path) -> None:
    Path(path).write_text(render_line_chart(series, title, x_label, y_label))
