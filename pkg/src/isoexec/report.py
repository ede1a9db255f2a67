"""Render sweep results as SVG line charts plus a plain-text ratio summary."""
from __future__ import annotations

from html import escape
from pathlib import Path
from typing import Any, Sequence

from .bench import MissingBaseline, RatioReport, ratio_report

# Reference ratios quoted for CIE vs the single-threaded baseline.
REFERENCE_RATIO = {"intra": 5.0, "inter": 1.4}

PANELS = (
    ("uks_per_s", "user_kernel_switches.svg", "User-kernel switches per second"),
    ("cs_per_s", "context_switches.svg", "Context switches per second"),
    ("rss_peak", "memory.svg", "Memory consumption (MB)"),
)

COLORS = {
    ("ste", "intra"): "#1f77b4", ("ste", "inter"): "#aec7e8",
    ("mte", "intra"): "#ff7f0e", ("mte", "inter"): "#ffbb78",
    ("cie", "intra"): "#2ca02c", ("cie", "inter"): "#98df8a",
}


class SchemaMismatch(ValueError):
    pass


def _series(rows: Sequence[dict[str, Any]], column: str) -> dict[tuple[str, str], list[tuple[int, float]]]:
    out: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for r in rows:
        if not r["valid"] or r[column] is None:
            continue
        val = r[column] / 1e6 if column == "rss_peak" else r[column]
        out.setdefault((r["executor"], r["mode"]), []).append((r["n"], float(val)))
    for pts in out.values():
        pts.sort()
    return out


def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    mag = 10 ** len(str(int(v)))
    for step in (0.1, 0.2, 0.25, 0.5, 1.0):
        if v <= mag * step:
            return mag * step
    return mag


def render_svg(title: str, series: dict[tuple[str, str], list[tuple[int, float]]],
               width: int = 640, height: int = 420) -> str:
    left, right, top, bottom = 70, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [x for pts in series.values() for x, _ in pts] or [0, 1]
    ys = [y for pts in series.values() for _, y in pts] or [1]
    x0, x1 = min(xs), max(xs)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    ymax = _nice_max(max(ys))

    def px(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return top + ph - (y / ymax) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        yv = ymax * i / 5
        parts.append(f'<line x1="{left - 4}" y1="{py(yv):.1f}" x2="{left}" y2="{py(yv):.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:g}</text>')
    for x in sorted(set(xs)):
        parts.append(f'<text x="{px(x):.1f}" y="{top + ph + 18}" text-anchor="middle">{x}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">'
                 f'number of callbacks N</text>')
    for i, (key, pts) in enumerate(sorted(series.items())):
        color = COLORS.get(key, "#555555")
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline class="series" data-series="{key[0]}-{key[1]}" fill="none" '
                     f'stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * i
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{escape(key[0].upper())} {escape(key[1])}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def summary_text(rows: Sequence[dict[str, Any]]) -> str:
    lines = [f"cells: {len(rows)} ({sum(1 for r in rows if r['valid'])} valid)"]
    executors = {r["executor"] for r in rows}
    if executors <= {"ste"}:
        lines.append("baseline only: no ratios to report")
        return "\n".join(lines) + "\n"
    try:
        rep: RatioReport = ratio_report(rows)
    except MissingBaseline as exc:
        lines.append(f"ratios unavailable: {exc}")
        return "\n".join(lines) + "\n"
    for mode in ("intra", "inter"):
        for metric, label in (("cs", "context switches"), ("uks", "user-kernel switches")):
            key = ("cie", mode, metric)
            if key in rep.max_ratio:
                lines.append(f"max CIE/STE {label} ratio ({mode}): {rep.max_ratio[key]:.2f}x "
                             f"(reference ~{REFERENCE_RATIO[mode]}x)")
            if key in rep.flatness:
                lines.append(f"flatness CIE/STE {label} ({mode}), ratio(N_max)/ratio(N=4): "
                             f"{rep.flatness[key]:.2f}")
    for mode in ("intra", "inter"):
        for metric, label in (("cs", "context switches"), ("uks", "user-kernel switches")):
            key = ("mte", mode, metric)
            if key in rep.max_ratio:
                lines.append(f"max MTE/STE {label} ratio ({mode}): {rep.max_ratio[key]:.2f}x")
    fallbacks = sum(r["fallbacks"] for r in rows)
    lines.append(f"scheduling fallbacks: {fallbacks}")
    return "\n".join(lines) + "\n"


def render_report(rows: Sequence[dict[str, Any]], out_dir) -> list[Path]:
    """Write the three SVG panels and ``summary.txt`` into ``out_dir``."""
    if not rows:
        raise SchemaMismatch("no rows to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for column, fname, title in PANELS:
        p = out_dir / fname
        p.write_text(render_svg(title, _series(rows, column)))
        written.append(p)
    s = out_dir / "summary.txt"
    s.write_text(summary_text(rows))
    written.append(s)
    return written
