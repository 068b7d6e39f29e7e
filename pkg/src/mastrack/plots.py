"""Minimal SVG line charts for simulation traces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
MODE_FILL = {"Tm": "#dbe9f6", "Tq": "#fdebd0", "Tn": "#ffffff"}
MAX_POINTS = 1500


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    color: str | None = None
    dashed: bool = False


@dataclass
class Chart:
    title: str
    xlabel: str = "t"
    ylabel: str = ""
    logy: bool = False
    width: int = 720
    height: int = 360
    series: list = field(default_factory=list)
    bands: list = field(default_factory=list)   # (x0, x1, fill)

    def add(self, label: str, x, y, color: str | None = None, dashed: bool = False) -> None:
        self.series.append(Series(label, np.asarray(x, dtype=float), np.asarray(y, dtype=float),
                                  color, dashed))


def _decimate(x: np.ndarray, y: np.ndarray, limit: int = MAX_POINTS):
    if x.size <= limit:
        return x, y
    idx = np.unique(np.linspace(0, x.size - 1, limit).astype(int))
    return x[idx], y[idx]


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list:
    if not math.isfinite(lo) or not math.isfinite(hi) or hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-12 * abs(hi):
        ticks.append(round(v, 12))
        v += step
    return ticks


def render(chart: Chart) -> str:
    W, H = chart.width, chart.height
    ml, mr, mt, mb = 70, 150, 34, 46
    pw, ph = W - ml - mr, H - mt - mb
    xs = [s.x for s in chart.series if s.x.size]
    if not xs:
        xs = [np.array([0.0, 1.0])]
    xlo = min(float(x.min()) for x in xs)
    xhi = max(float(x.max()) for x in xs)
    if xhi <= xlo:
        xhi = xlo + 1.0
    ys = []
    for s in chart.series:
        y = s.y[np.isfinite(s.y)]
        if chart.logy:
            y = y[y > 0]
            y = np.log10(y) if y.size else y
        if y.size:
            ys.append(y)
    if ys:
        ylo = min(float(y.min()) for y in ys)
        yhi = max(float(y.max()) for y in ys)
    else:
        ylo, yhi = 0.0, 1.0
    if chart.logy:
        ylo = max(ylo, yhi - 30.0)
    if yhi <= ylo:
        pad = 1.0 if ylo == 0 else 0.1 * abs(ylo)
        ylo, yhi = ylo - pad, yhi + pad

    def px(x):
        return ml + (x - xlo) / (xhi - xlo) * pw

    def py(y):
        return mt + ph - (y - ylo) / (yhi - ylo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           'font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>']
    for x0, x1, fill in chart.bands:
        a, b = px(max(x0, xlo)), px(min(x1, xhi))
        if b > a:
            out.append(f'<rect x="{a:.2f}" y="{mt}" width="{b - a:.2f}" height="{ph}" fill="{fill}"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    for tx in _nice_ticks(xlo, xhi):
        x = px(tx)
        out.append(f'<line x1="{x:.2f}" y1="{mt + ph}" x2="{x:.2f}" y2="{mt + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{x:.2f}" y="{mt + ph + 16}" text-anchor="middle">{tx:g}</text>')
    for ty in _nice_ticks(ylo, yhi):
        y = py(ty)
        label = f"1e{ty:g}" if chart.logy else f"{ty:g}"
        out.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="#333"/>')
        out.append(f'<line x1="{ml}" y1="{y:.2f}" x2="{ml + pw}" y2="{y:.2f}" stroke="#eee"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.2f}" text-anchor="end">{label}</text>')
    for k, s in enumerate(chart.series):
        color = s.color or PALETTE[k % len(PALETTE)]
        x, y = _decimate(s.x, s.y)
        if chart.logy:
            with np.errstate(divide="ignore", invalid="ignore"):
                y = np.where(y > 0, np.log10(np.where(y > 0, y, 1.0)), np.nan)
        ok = np.isfinite(y)
        y = np.clip(y, ylo, yhi)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
        dash = ' stroke-dasharray="5,4"' if s.dashed else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.3"{dash} points="{pts}"/>')
        ly = mt + 14 + 16 * k
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly - 4}" x2="{ml + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{ml + pw + 36}" y="{ly}">{escape(s.label)}</text>')
    out.append(f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(chart.title)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{H - 8}" text-anchor="middle">{escape(chart.xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(chart.ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def mode_bands(t: np.ndarray, modes: Sequence[str]) -> list:
    bands = []
    if len(t) == 0:
        return bands
    start, cur = float(t[0]), str(modes[0])
    for x, m in zip(t[1:], modes[1:]):
        m = str(m)
        if m != cur:
            bands.append((start, float(x), MODE_FILL.get(cur, "#ffffff")))
            start, cur = float(x), m
    bands.append((start, float(t[-1]), MODE_FILL.get(cur, "#ffffff")))
    return bands


def trace_charts(trace, envelope=None) -> dict:
    """Chart set for one run: tracking error per state, observer errors, V(t), timeline."""
    t = trace.t
    modes = [m.value if hasattr(m, "value") else str(m) for m in trace.modes]
    bands = mode_bands(t, modes)
    N, n = trace.followers.shape[1], trace.followers.shape[2]
    charts = {}
    for s in range(n):
        c = Chart(f"tracking error, state {s + 1}", ylabel=f"x_i{s + 1} - x_0{s + 1}", bands=bands)
        for i in range(N):
            c.add(f"follower {i + 1}", t, trace.errors[:, i, s])
        charts[f"tracking_state{s + 1}.svg"] = c
    c = Chart("observer error norm", ylabel="|xhat_i - x_i|", logy=True, bands=bands)
    for i in range(N):
        c.add(f"follower {i + 1}", t, np.linalg.norm(trace.psi[:, i], axis=1))
    charts["observer_error.svg"] = c
    if trace.V is not None:
        c = Chart("Lyapunov value", ylabel="V(t)", logy=True, bands=bands)
        c.add("V", t, trace.V)
        if envelope is not None:
            c.add("envelope", t, envelope, color="#555", dashed=True)
        charts["lyapunov.svg"] = c
    code = {"Tm": 2.0, "Tq": 1.0, "Tn": 0.0}
    c = Chart("communication mode and topology", ylabel="mode (2 Tm, 1 Tq, 0 Tn) / topology")
    c.add("mode", t, [code.get(m, 0.0) for m in modes])
    c.add("topology", t, trace.topology.astype(float), dashed=True)
    charts["timeline.svg"] = c
    return charts


def write_charts(charts: dict, directory: Path) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, chart in charts.items():
        path = directory / name
        path.write_text(render(chart))
        written.append(path)
    return written
