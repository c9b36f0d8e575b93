"""Figure data: placement scatter plots and ladder bar charts as CSV + SVG.

SVG is written by hand so no plotting dependency is needed.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import EnvConfig
from .metrics import METRICS, MetricsReport
from .placement import Regime, sample_placement, validate_sample

PALETTE = ("#d62728", "#ff7f0e", "#2ca02c", "#1f77b4", "#9467bd", "#8c564b", "#e377c2")


def scatter_points(config: EnvConfig, regime: Regime, n: int, seed: int = 0) -> list[tuple[int, str, float, float]]:
    """``n`` placements, one (sample, object, x, y) row per object.  Every
    sample is re-validated."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        s = sample_placement(config, regime, rng)
        validate_sample(config, s)
        for obj, (x, y) in zip(config.objects, s.positions):
            rows.append((i, obj.name, float(x), float(y)))
    return rows


def object_boxes(rows) -> dict[str, tuple[float, float, float, float]]:
    """Per-object bounding box (xmin, ymin, xmax, ymax) of scatter rows."""
    pts: dict[str, list] = {}
    for _, name, x, y in rows:
        pts.setdefault(name, []).append((x, y))
    out = {}
    for name, p in pts.items():
        a = np.array(p)
        out[name] = (a[:, 0].min(), a[:, 1].min(), a[:, 0].max(), a[:, 1].max())
    return out


def boxes_overlap(a, b) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


def scatter_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "object", "x", "y"])
    for i, name, x, y in rows:
        w.writerow([i, name, f"{x:.6f}", f"{y:.6f}"])
    return buf.getvalue()


def scatter_svg(config: EnvConfig, rows, title: str = "", px_per_m: float = 1200.0) -> str:
    hx, hy = config.workspace.x_half_extent, config.workspace.y_half_extent
    pad = 30
    w, h = 2 * hx * px_per_m, 2 * hy * px_per_m
    names = [o.name for o in config.objects]

    def sx(x):
        return pad + (x + hx) * px_per_m

    def sy(y):
        return pad + (hy - y) * px_per_m

    style = "".join(f".o{k}{{fill:{PALETTE[k % len(PALETTE)]};fill-opacity:0.5}}" for k in range(len(names)))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w + 2 * pad + 140:.0f}" height="{h + 2 * pad:.0f}">',
        f"<style>{style}</style>",
        f'<rect x="{pad}" y="{pad}" width="{w:.1f}" height="{h:.1f}" fill="none" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 10}" font-size="14">{title}</text>',
    ]
    for _, name, x, y in rows:
        parts.append(f'<circle class="o{names.index(name)}" cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2"/>')
    for k, name in enumerate(names):
        ly = pad + 16 * k + 10
        parts.append(f'<circle class="o{k}" cx="{w + pad + 15:.1f}" cy="{ly}" r="5"/>')
        parts.append(f'<text x="{w + pad + 25:.1f}" y="{ly + 4}" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scatter_export(config: EnvConfig, regime: Regime, n: int, seed: int, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = scatter_points(config, regime, n, seed)
    stem = f"scatter_{regime.value}"
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    csv_path.write_text(scatter_csv(rows))
    svg_path.write_text(scatter_svg(config, rows, regime.label))
    return csv_path, svg_path


def bars_svg(reports: Sequence[MetricsReport], label_key: str = "regime", title: str = "") -> str:
    """Grouped bars, one group per report, one bar per metric."""
    bar, gap, height, pad = 18, 24, 200, 40
    group_w = bar * len(METRICS) + gap
    width = pad * 2 + group_w * max(len(reports), 1) + 120
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 2 * pad + 20}">',
        f'<text x="{pad}" y="{pad - 15}" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{pad + height}" x2="{width - 120}" y2="{pad + height}" stroke="black"/>',
    ]
    for g, r in enumerate(reports):
        x0 = pad + g * group_w
        for k, m in enumerate(METRICS):
            v = r.rates[m].rate
            hgt = v * height
            parts.append(
                f'<rect x="{x0 + k * bar}" y="{pad + height - hgt:.1f}" width="{bar - 2}" height="{hgt:.1f}" '
                f'fill="{PALETTE[k]}"/>'
            )
        parts.append(f'<text x="{x0}" y="{pad + height + 16}" font-size="11">{r.group.get(label_key, "")}</text>')
    for k, m in enumerate(METRICS):
        parts.append(f'<rect x="{width - 110}" y="{pad + 16 * k}" width="10" height="10" fill="{PALETTE[k]}"/>')
        parts.append(f'<text x="{width - 95}" y="{pad + 16 * k + 9}" font-size="11">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
