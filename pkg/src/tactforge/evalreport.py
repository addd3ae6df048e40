"""Evaluation statistics and reports: mm-scale depth errors, per-axis wrench
errors, violin (quantile + kernel density) summaries, and deterministic
JSON/CSV/SVG report files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from importlib import resources

import numpy as np

from .gelsim import DepthCodec

QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)


@dataclass
class DepthErrorStats:
    mean_l1_mm: float
    mean_l2_mm: float  # root-mean-square per-pixel error, labeled explicitly
    per_frame_l1_mm: list = field(default_factory=list)
    quantiles_mm: dict = field(default_factory=dict)


@dataclass
class WrenchErrorStats:
    per_axis_mae: dict = field(default_factory=dict)  # Fx..Tz
    grouped_mae: dict = field(default_factory=dict)  # F_xy, F_z, T_xy, T_z
    units: dict = field(default_factory=lambda: {"force": "N", "torque": "N*mm"})


def depth_errors(pred: np.ndarray, gt: np.ndarray,
                 codec: DepthCodec = DepthCodec()) -> DepthErrorStats:
    """Errors between 8-bit depth images in mm via the codec step.

    Accepts a single image pair or stacks of frames (leading axis)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[None]
        gt = gt[None]
    dpx = pred.astype(np.float64) - gt.astype(np.float64)
    dmm = dpx * codec.step
    per_frame = np.mean(np.abs(dmm), axis=(1, 2))
    all_abs = np.abs(dmm).ravel()
    qs = {f"q{int(q * 100):02d}": float(v)
          for q, v in zip(QUANTILES, np.quantile(all_abs, QUANTILES))}
    return DepthErrorStats(
        mean_l1_mm=float(np.mean(np.abs(dmm))),
        mean_l2_mm=float(np.sqrt(np.mean(dmm**2))),
        per_frame_l1_mm=[float(v) for v in per_frame],
        quantiles_mm=qs,
    )


_AXES = ("Fx", "Fy", "Fz", "Tx", "Ty", "Tz")


def wrench_errors(preds, gts) -> WrenchErrorStats:
    """Per-axis mean absolute error over paired lists of denormalized
    6-vectors, with the grouped means used in the violin figures."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 6)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 6)
    if len(p) != len(g):
        raise ValueError(f"length mismatch {len(p)} vs {len(g)}")
    mae = np.mean(np.abs(p - g), axis=0)
    per_axis = {a: float(v) for a, v in zip(_AXES, mae)}
    grouped = {
        "F_xy": float((mae[0] + mae[1]) / 2.0),
        "F_z": float(mae[2]),
        "T_xy": float((mae[3] + mae[4]) / 2.0),
        "T_z": float(mae[5]),
    }
    return WrenchErrorStats(per_axis_mae=per_axis, grouped_mae=grouped)


def violin_stats(samples, grid_points: int = 128) -> dict:
    """Order-statistic quantiles plus a Gaussian KDE polyline (Silverman
    bandwidth) for violin plotting."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("violin_stats needs at least one sample")
    qs = {f"q{int(q * 100):02d}": float(v)
          for q, v in zip(QUANTILES, np.quantile(x, QUANTILES))}
    n = x.size
    std = float(np.std(x, ddof=1)) if n > 1 else 0.0
    iqr = float(np.subtract(*np.quantile(x, [0.75, 0.25])))
    sigma = min(std, iqr / 1.34) if iqr > 0 else std
    bw = 0.9 * sigma * n ** (-0.2) if sigma > 0 else 1.0
    lo = float(x.min()) - 3 * bw
    hi = float(x.max()) + 3 * bw
    grid = np.linspace(lo, hi, grid_points)
    dens = np.exp(-0.5 * ((grid[:, None] - x[None, :]) / bw) ** 2).sum(axis=1)
    dens /= n * bw * np.sqrt(2 * np.pi)
    return {
        "count": int(n),
        "mean": float(x.mean()),
        "quantiles": qs,
        "bandwidth": float(bw),
        "kde_grid": [float(v) for v in grid],
        "kde_density": [float(v) for v in dens],
    }


# ---------------------------------------------------------------- reporting

def _svg_polyline(points, width=480, height=240, margin=36, stroke="#336",
                  title="") -> str:
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    if not xs:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = (width - 2 * margin) / max(x1 - x0, 1e-12)
    sy = (height - 2 * margin) / max(y1 - y0, 1e-12)
    pts = " ".join(f"{margin + (x - x0) * sx:.2f},{height - margin - (y - y0) * sy:.2f}"
                   for x, y in points)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" font-size="12">{title}</text>\n'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>\n'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>\n'
        f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="1.5"/>\n'
        f'</svg>\n'
    )


def _svg_violin(vstats: dict, width=240, height=320, title="") -> str:
    grid = vstats["kde_grid"]
    dens = vstats["kde_density"]
    dmax = max(dens) or 1.0
    cx = width / 2.0
    margin = 30
    sy = (height - 2 * margin) / max(grid[-1] - grid[0], 1e-12)
    half = (width / 2.0 - 20)
    right = [(cx + d / dmax * half, height - margin - (g - grid[0]) * sy)
             for g, d in zip(grid, dens)]
    left = [(2 * cx - x, y) for x, y in reversed(right)]
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in right + left)
    q = vstats["quantiles"]
    med_y = height - margin - (q["q50"] - grid[0]) * sy
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{cx:.0f}" y="16" text-anchor="middle" font-size="12">{title}</text>\n'
        f'<polygon points="{pts}" fill="#aac" stroke="#336"/>\n'
        f'<line x1="{cx - half:.2f}" y1="{med_y:.2f}" x2="{cx + half:.2f}" '
        f'y2="{med_y:.2f}" stroke="black" stroke-dasharray="4 3"/>\n'
        f'</svg>\n'
    )


def report_schema() -> dict:
    with resources.files("tactforge.schemas").joinpath("report.schema.json").open() as f:
        return json.load(f)


def emit_report(out_dir, depth_stats: DepthErrorStats | None = None,
                wrench_stats: WrenchErrorStats | None = None,
                violins: dict[str, dict] | None = None,
                metadata: dict | None = None,
                checkpoint_path: str | None = None) -> str:
    """Write report.json (authoritative, schema-validated), CSV tables, and
    SVG plots. Byte-deterministic for identical inputs."""
    os.makedirs(out_dir, exist_ok=True)
    meta = dict(metadata or {})
    if checkpoint_path:
        with open(checkpoint_path, "rb") as f:
            meta["checkpoint_sha256"] = hashlib.sha256(f.read()).hexdigest()
    report = {
        "kind": "tactforge-report",
        "version": 1,
        "metadata": meta,
        "depth": asdict(depth_stats) if depth_stats else None,
        "wrench": asdict(wrench_stats) if wrench_stats else None,
        "violins": violins or {},
    }
    import jsonschema
    jsonschema.validate(report, report_schema())
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")

    if depth_stats is not None:
        with open(os.path.join(out_dir, "depth_errors.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value_mm"])
            w.writerow(["mean_l1", depth_stats.mean_l1_mm])
            w.writerow(["rms", depth_stats.mean_l2_mm])
            for k, v in sorted(depth_stats.quantiles_mm.items()):
                w.writerow([k, v])
        pts = list(enumerate(depth_stats.per_frame_l1_mm))
        with open(os.path.join(out_dir, "depth_per_frame.svg"), "w") as f:
            f.write(_svg_polyline(pts, title="per-frame mean |error| (mm)"))
    if wrench_stats is not None:
        with open(os.path.join(out_dir, "wrench_errors.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["axis", "mae"])
            for k, v in sorted(wrench_stats.per_axis_mae.items()):
                w.writerow([k, v])
            for k, v in sorted(wrench_stats.grouped_mae.items()):
                w.writerow([k, v])
    for name, v in (violins or {}).items():
        with open(os.path.join(out_dir, f"violin_{name}.svg"), "w") as f:
            f.write(_svg_violin(v, title=name))
    return json_path
