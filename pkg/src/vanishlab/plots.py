"""Deterministic static SVG line plots.

Output depends only on the input numbers: coordinates are printed with a
fixed number of decimals and no timestamps or random identifiers appear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 78, "right": 170, "top": 40, "bottom": 56}
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    flagged: Sequence[bool] = field(default_factory=tuple)


def _f(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    e = math.log2(abs(v))
    if abs(e - round(e)) < 1e-9 and abs(e) >= 3:
        return f"{'-' if v < 0 else ''}2^{int(round(e))}"
    return f"{v:.3g}"


class _Axis:
    def __init__(self, values, log: bool, lo_px: float, hi_px: float):
        vals = [v for v in values if math.isfinite(v) and (v > 0 or not log)]
        if not vals:
            vals = [1.0] if log else [0.0]
        self.log = log
        lo, hi = min(vals), max(vals)
        if log:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi - lo < 1e-300:
            pad = 0.5 if log else max(abs(lo) * 0.1, 1e-12)
            lo, hi = lo - pad, hi + pad
        else:
            pad = 0.05 * (hi - lo)
            lo, hi = lo - pad, hi + pad
        self.lo, self.hi = lo, hi
        self.lo_px, self.hi_px = lo_px, hi_px

    def ok(self, v: float) -> bool:
        return math.isfinite(v) and (v > 0 or not self.log)

    def __call__(self, v: float) -> float:
        u = math.log10(v) if self.log else v
        return self.lo_px + (u - self.lo) / (self.hi - self.lo) * (self.hi_px - self.lo_px)

    def ticks(self, data: Sequence[float]) -> list[float]:
        if self.log:
            a, b = math.ceil(self.lo), math.floor(self.hi)
            if b - a >= 1:
                return [10.0 ** k for k in range(a, b + 1)]
            good = sorted({v for v in data if self.ok(v)})
            return good[:: max(1, len(good) // 6)]
        span = self.hi - self.lo
        step = 10 ** math.floor(math.log10(span / 5))
        for m in (1, 2, 5, 10):
            if span / (m * step) <= 6:
                step *= m
                break
        first = math.ceil(self.lo / step)
        return [k * step for k in range(first, int(math.floor(self.hi / step)) + 1)]


def line_plot(series: Sequence[Series], *, title: str, xlabel: str, ylabel: str, logx: bool = False,
              logy: bool = False) -> str:
    """One SVG document; flagged points are drawn as hollow red squares."""
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    xs = [v for s in series for v in s.x]
    ys = [v for s in series for v in s.y]
    ax = _Axis(xs, logx, x0, x1)
    ay = _Axis(ys, logy, y0, y1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{_f((x0 + x1) / 2)}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>']
    for t in ax.ticks(xs):
        px = ax(t)
        out.append(f'<line x1="{_f(px)}" y1="{y0}" x2="{_f(px)}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{_f(px)}" y="{y0 + 18}" text-anchor="middle">{escape(_tick_label(t))}</text>')
    for t in ay.ticks(ys):
        py = ay(t)
        out.append(f'<line x1="{x0 - 5}" y1="{_f(py)}" x2="{x0}" y2="{_f(py)}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{_f(py + 4)}" text-anchor="end">{escape(_tick_label(t))}</text>')
    scale_note = lambda log: " (log)" if log else ""  # noqa: E731
    out.append(f'<text x="{_f((x0 + x1) / 2)}" y="{HEIGHT - 16}" text-anchor="middle">'
               f'{escape(xlabel + scale_note(logx))}</text>')
    out.append(f'<text x="16" y="{_f((y0 + y1) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 16 {_f((y0 + y1) / 2)})">{escape(ylabel + scale_note(logy))}</text>')
    any_flag = False
    for k, s in enumerate(series):
        colour = PALETTE[k % len(PALETTE)]
        flags = list(s.flagged) + [False] * (len(s.x) - len(s.flagged))
        pts = [(ax(a), ay(b), f) for a, b, f in zip(s.x, s.y, flags) if ax.ok(a) and ay.ok(b)]
        if len(pts) > 1:
            path = " ".join(f"{_f(px)},{_f(py)}" for px, py, _ in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        for px, py, f in pts:
            if f:
                any_flag = True
                out.append(f'<rect class="under-resolved" x="{_f(px - 4)}" y="{_f(py - 4)}" width="8" height="8" '
                           f'fill="none" stroke="red" stroke-width="1.5"/>')
            else:
                out.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="2.5" fill="{colour}"/>')
        ly = y1 + 14 * k + 8
        out.append(f'<line x1="{x1 + 12}" y1="{ly}" x2="{x1 + 32}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 38}" y="{ly + 4}">{escape(s.label)}</text>')
    if any_flag:
        ly = y1 + 14 * len(series) + 14
        out.append(f'<rect x="{x1 + 18}" y="{ly - 4}" width="8" height="8" fill="none" stroke="red"/>')
        out.append(f'<text x="{x1 + 38}" y="{ly + 4}">under-resolved</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_pairings_svg(record) -> str:
    under = [f != "resolved" for f in record.flags]
    series = [Series(f"source {j}", record.params, [float(p[j]) for p in record.pairings], under)
              for j in range(record.pairings.shape[1])]
    name = "nu" if record.kind == "nu" else "delta"
    return line_plot(series, title=f"Source pairings against {name}", xlabel=name, ylabel="pairing", logx=True)


def sweep_gaps_svg(record) -> str:
    under = [record.flags[i] != "resolved" or record.flags[i + 1] != "resolved" for i in range(len(record.gaps))]
    name = "nu" if record.kind == "nu" else "delta"
    s = Series("Cauchy gap", record.params[1:], record.gaps, under)
    return line_plot([s], title=f"Cauchy gaps against {name}", xlabel=f"{name} (finer run)", ylabel="gap",
                     logx=True, logy=True)


def dissipation_svg(params, values, flags=None) -> str:
    under = [f != "resolved" for f in flags] if flags else []
    return line_plot([Series("D", params, values, under)], title="Dissipation series",
                     xlabel="nu", ylabel="nu int int |grad rho|^2", logx=True)


def ledger_svg(ledger: dict) -> str:
    """``grad_energy_cum`` already carries the ``2 nu`` factor."""
    t = ledger["times"]
    l2 = ledger["l2_sq"]
    budget = [a + g for a, g in zip(l2, ledger["grad_energy_cum"])]
    return line_plot([Series("||rho||^2", t, l2), Series("||rho||^2 + 2 nu int|grad rho|^2", t, budget)],
                     title="Energy ledger", xlabel="t", ylabel="energy")


def residual_svg(report) -> str:
    levels = list(range(1, len(report.levels) + 1))
    series = [Series(f"phi {j}", levels, [abs(v) for v in s]) for j, s in enumerate(report.series)]
    return line_plot(series, title="Weak residual under quadrature refinement", xlabel="level",
                     ylabel="|residual|", logy=True)
