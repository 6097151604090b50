"""Render run artifacts (CSV) into a markdown report and SVG figures.

Output is deterministic: regenerating from the same artifacts produces
byte-identical files (no timestamps, no environment capture). SVG plots
are emitted directly as polyline/rect primitives.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

__all__ = ["write_report"]

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 16, 16, 42
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _read_csv(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh)]


def _md_table(rows: list[list[str]]) -> str:
    head, *body = rows
    out = ["| " + " | ".join(head) + " |",
           "| " + " | ".join("---" for _ in head) + " |"]
    out += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(out) + "\n"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    t0 = math.ceil(lo / step) * step
    out = []
    t = t0
    while t <= hi + 1e-12 * step:
        out.append(round(t, 12))
        t += step
    return out


class _Canvas:
    def __init__(self, xlo, xhi, ylo, yhi, xlabel="", ylabel="", logy=False):
        self.xlo, self.xhi = xlo, xhi
        self.ylo, self.yhi = ylo, yhi
        self.logy = logy
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
        ]
        self._frame(xlabel, ylabel)

    def x(self, v: float) -> float:
        span = self.xhi - self.xlo or 1.0
        return _ML + (v - self.xlo) / span * (_W - _ML - _MR)

    def y(self, v: float) -> float:
        if self.logy:
            v = math.log10(max(v, 1e-300))
            lo, hi = math.log10(max(self.ylo, 1e-300)), math.log10(max(self.yhi, 1e-300))
        else:
            lo, hi = self.ylo, self.yhi
        span = hi - lo or 1.0
        return _H - _MB - (v - lo) / span * (_H - _MT - _MB)

    def _frame(self, xlabel, ylabel):
        p = self.parts
        p.append(
            f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
            f'height="{_H - _MT - _MB}" fill="none" stroke="#333"/>'
        )
        for t in _ticks(self.xlo, self.xhi):
            px = self.x(t)
            p.append(f'<line x1="{px:.1f}" y1="{_H - _MB}" x2="{px:.1f}" '
                     f'y2="{_H - _MB + 4}" stroke="#333"/>')
            p.append(f'<text x="{px:.1f}" y="{_H - _MB + 16}" '
                     f'text-anchor="middle">{t:g}</text>')
        if self.logy:
            lo = math.floor(math.log10(max(self.ylo, 1e-300)))
            hi = math.ceil(math.log10(max(self.yhi, 1e-300)))
            yticks = [10.0**e for e in range(int(lo), int(hi) + 1)]
        else:
            yticks = _ticks(self.ylo, self.yhi)
        for t in yticks:
            py = self.y(t)
            if py < _MT - 1 or py > _H - _MB + 1:
                continue
            p.append(f'<line x1="{_ML - 4}" y1="{py:.1f}" x2="{_ML}" '
                     f'y2="{py:.1f}" stroke="#333"/>')
            p.append(f'<text x="{_ML - 7}" y="{py + 3:.1f}" '
                     f'text-anchor="end">{t:g}</text>')
        if xlabel:
            p.append(f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 8}" '
                     f'text-anchor="middle">{xlabel}</text>')
        if ylabel:
            p.append(f'<text x="14" y="{(_MT + _H - _MB) / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 14 {(_MT + _H - _MB) / 2})">{ylabel}</text>')

    def polyline(self, xs, ys, color, label=None, idx=0):
        pts = " ".join(
            f"{self.x(a):.1f},{self.y(b):.1f}"
            for a, b in zip(xs, ys)
            if b is not None and math.isfinite(b)
        )
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>'
        )
        if label:
            ly = _MT + 14 + 14 * idx
            self.parts.append(f'<line x1="{_W - _MR - 120}" y1="{ly - 4}" '
                              f'x2="{_W - _MR - 96}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
            self.parts.append(f'<text x="{_W - _MR - 90}" y="{ly}">{label}</text>')

    def bars(self, lefts, rights, heights, color):
        base = self.y(self.ylo if not self.logy else max(self.ylo, 1e-300))
        for l, r, h in zip(lefts, rights, heights):
            if h <= 0:
                continue
            x0, x1 = self.x(l), self.x(r)
            y1 = self.y(h)
            self.parts.append(
                f'<rect x="{x0:.1f}" y="{y1:.1f}" width="{max(x1 - x0, 0.5):.1f}" '
                f'height="{max(base - y1, 0):.1f}" fill="{color}" fill-opacity="0.7"/>'
            )

    def vline(self, v, color="#000", dash="4 3"):
        px = self.x(v)
        self.parts.append(
            f'<line x1="{px:.1f}" y1="{_MT}" x2="{px:.1f}" y2="{_H - _MB}" '
            f'stroke="{color}" stroke-dasharray="{dash}"/>'
        )

    def hline(self, v, color="#000", dash="4 3"):
        py = self.y(v)
        self.parts.append(
            f'<line x1="{_ML}" y1="{py:.1f}" x2="{_W - _MR}" y2="{py:.1f}" '
            f'stroke="{color}" stroke-dasharray="{dash}"/>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _error_series_svg(path: Path, bench_rmse: float | None) -> str:
    rows = _read_csv(path)
    head, body = rows[0], rows[1:]
    times = [float(r[0]) for r in body]
    svg_rel = "error_series.svg"
    ymax = 0.0
    series = []
    for j, name in enumerate(head[1:]):
        vals = []
        for r in body:
            try:
                v = float(r[j + 1])
            except ValueError:
                v = math.nan
            vals.append(v if math.isfinite(v) else None)
        finite = [v for v in vals if v is not None]
        if finite:
            ymax = max(ymax, max(finite))
        series.append((name, vals))
    ylo = 1e-3
    canvas = _Canvas(times[0], times[-1], ylo, max(ymax, 1.0) * 1.2,
                     xlabel="time", ylabel="posterior error", logy=True)
    if bench_rmse:
        canvas.hline(bench_rmse)
    for j, (name, vals) in enumerate(series):
        clipped = [None if v is None else max(v, ylo) for v in vals]
        canvas.polyline(times, clipped, _COLORS[j % len(_COLORS)], label=name, idx=j)
    out = path.parent / svg_rel
    out.write_text(canvas.render())
    return out.name


def _hist_svg(path: Path) -> str | None:
    rows = _read_csv(path)
    if len(rows) < 2:
        return None
    body = rows[1:]
    lefts = [float(r[0]) for r in body]
    rights = [float(r[1]) for r in body]
    counts = [int(r[2]) for r in body]
    if not any(counts):
        return None
    canvas = _Canvas(lefts[0], rights[-1], 0.5, max(counts) * 1.5,
                     xlabel=path.stem.split("_")[0], ylabel="count", logy=True)
    canvas.bars(lefts, rights, counts, _COLORS[0])
    out = path.with_suffix(".svg")
    out.write_text(canvas.render())
    return out.name


def write_report(out_dir: Path) -> list[Path]:
    """Regenerate report.md and SVG figures from an output directory."""
    out_dir = Path(out_dir)
    summary = out_dir / "summary.csv"
    sweeps = sorted(out_dir.glob("sweep_*.csv"))
    if not summary.exists() and not sweeps:
        raise FileNotFoundError(
            f"no run artifacts under {out_dir}: expected summary.csv (from the run "
            f"command) and/or sweep_*.csv (from the sweep command), plus optional "
            f"figures/*.csv"
        )
    md = ["# Twin-experiment report", ""]
    written: list[Path] = []
    manifest = out_dir / "manifest.json"
    bench_rmse = None
    thresholds = out_dir / "thresholds.json"
    if thresholds.exists():
        data = json.loads(thresholds.read_text())
        bench_rmse = data.get("benchmark_rmse")
        md += [
            "## Thresholds",
            "",
            f"- m1 (innovation statistic): {data['m1']:.4g}",
            f"- m2 (cross-covariance statistic): {data['m2']:.4g}",
            f"- benchmark RMSE: {data['benchmark_rmse']:.4g}",
            "",
        ]
    if manifest.exists():
        info = json.loads(manifest.read_text())
        md += [f"Seed {info.get('seed')}, version {info.get('version')}, "
               f"provenance {info.get('provenance')}.", ""]
    if summary.exists():
        md += ["## Batch summary", "", _md_table(_read_csv(summary))]
    for sw in sweeps:
        md += [f"## Sweep: {sw.stem.removeprefix('sweep_')}", "", _md_table(_read_csv(sw))]
    fig_dir = out_dir / "figures"
    if fig_dir.is_dir():
        series = fig_dir / "error_series.csv"
        if series.exists():
            name = _error_series_svg(series, bench_rmse)
            md += ["## Posterior error (one realization)", "",
                   f"![error series](figures/{name})", ""]
            written.append(fig_dir / name)
        for hist in sorted(fig_dir.glob("*_hist_*.csv")):
            name = _hist_svg(hist)
            if name:
                md += [f"![{hist.stem}](figures/{name})", ""]
                written.append(fig_dir / name)
    report = out_dir / "report.md"
    report.write_text("\n".join(md))
    return [report] + written
