"""Static SVG line plots of round telemetry."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

from .errors import FormatError

TELEMETRY_COLUMNS = ("round", "acc", "asr", "sigma", "n_attackers_selected", "selected_ids")
LABELS = {"acc": "ACC", "asr": "ASR", "sigma": "sigma"}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


@dataclass(frozen=True)
class Telemetry:
    path: str
    rounds: tuple
    columns: dict

    def points(self, metric):
        return [(r, v) for r, v in zip(self.rounds, self.columns[metric]) if v is not None]


def _cell(path, lineno, name, text):
    if text == "":
        return None
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: column {name!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise FormatError(f"{path}:{lineno}: column {name!r} is not finite: {text!r}")
    return v


def read_telemetry(path) -> Telemetry:
    """Parse a telemetry CSV; any malformed line raises :class:`FormatError` naming it."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TELEMETRY_COLUMNS:
        raise FormatError(f"{path}:1: expected header {','.join(TELEMETRY_COLUMNS)}")
    rounds, cols = [], {k: [] for k in ("acc", "asr", "sigma")}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(TELEMETRY_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(TELEMETRY_COLUMNS)} fields, got {len(row)}")
        try:
            r = int(row[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: round is not an integer: {row[0]!r}") from None
        if rounds and r <= rounds[-1]:
            raise FormatError(f"{path}:{lineno}: rounds must increase")
        rounds.append(r)
        for name, text in zip(("acc", "asr", "sigma"), row[1:4]):
            cols[name].append(_cell(path, lineno, name, text))
    return Telemetry(str(path), tuple(rounds), cols)


class _XAxis:
    """Linear, or piecewise linear with the first ``knee`` rounds given half the width."""

    def __init__(self, lo, hi, knee=None):
        self.lo, self.hi = lo, max(hi, lo + 1)
        self.knee = knee if knee is not None and lo < knee < self.hi else None

    def __call__(self, x):
        if self.knee is None:
            return (x - self.lo) / (self.hi - self.lo)
        if x <= self.knee:
            return 0.5 * (x - self.lo) / (self.knee - self.lo)
        return 0.5 + 0.5 * (x - self.knee) / (self.hi - self.knee)

    def ticks(self):
        if self.knee is None:
            return _nice_ticks(self.lo, self.hi)
        left = [t for t in _nice_ticks(self.lo, self.knee) if t < self.knee]
        return left + [t for t in _nice_ticks(self.knee, self.hi) if t >= self.knee]


def _nice_ticks(lo, hi, n=5):
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    out, t = [], start
    while t <= hi + 1e-9 * step:
        out.append(round(t, 12))
        t += step
    return out


def _fmt_tick(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}"
    return f"{v:g}"


def render_svg(series, metric, *, log_y=False, aw_marker=None, x_knee=None, width=640, height=400,
               title=None) -> str:
    """One SVG with a polyline per ``(label, [(round, value), ...])`` entry of ``series``."""
    ml, mr, mt, mb = 64, 16, 28, 48
    pw, ph = width - ml - mr, height - mt - mb
    pts_all = [p for _, pts in series for p in pts]
    if log_y:
        pts_all = [p for p in pts_all if p[1] > 0]
    xs = [p[0] for p in pts_all] or [0, 1]
    ys = [p[1] for p in pts_all] or [0.0, 1.0]
    xaxis = _XAxis(min(xs), max(xs), x_knee)
    if log_y:
        y_lo = math.floor(math.log10(min(ys)))
        y_hi = math.ceil(math.log10(max(ys)))
        y_hi = y_hi if y_hi > y_lo else y_lo + 1
        ymap = lambda v: (math.log10(v) - y_lo) / (y_hi - y_lo)
        yticks = [10.0 ** e for e in range(y_lo, y_hi + 1)]
    else:
        y_lo, y_hi = (0.0, 1.0) if metric in ("acc", "asr") else (min(0.0, min(ys)), max(ys) or 1.0)
        ymap = lambda v: (v - y_lo) / (y_hi - y_lo)
        yticks = _nice_ticks(y_lo, y_hi)

    def px(x):
        return ml + pw * xaxis(x)

    def py(v):
        return mt + ph * (1.0 - ymap(v))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for t in xaxis.ticks():
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{mt + ph}" x2="{x:.2f}" y2="{mt + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt_tick(t)}</text>')
    for t in yticks:
        y = py(t)
        out.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt_tick(t)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">round</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(LABELS.get(metric, metric))}</text>')
    if aw_marker is not None and xaxis.lo <= aw_marker <= xaxis.hi:
        x = px(aw_marker)
        out.append(f'<line class="aw-marker" x1="{x:.2f}" y1="{mt}" x2="{x:.2f}" y2="{mt + ph}" '
                   f'stroke="black" stroke-width="1.5"/>')
    for i, (label, pts) in enumerate(series):
        if log_y:
            pts = [p for p in pts if p[1] > 0]
        if not pts:
            continue
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(r):.2f},{py(v):.2f}" for r, v in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                   f'<title>{escape(label)}</title></polyline>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 13 * i}" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_files(paths, metric, out_path, **options) -> str:
    series = []
    for p in paths:
        tel = read_telemetry(p)
        series.append((str(p), tel.points(metric)))
    svg = render_svg(series, metric, **options)
    with open(out_path, "w") as fh:
        fh.write(svg)
    return svg
