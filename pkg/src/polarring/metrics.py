"""Dice overlap of wall regions and Hausdorff distance between contours."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .contour import ContourPair, SliceGrid, binary_wall, polygon_area, to_polygons

log = logging.getLogger(__name__)

DENSIFY_STEP_MM = 0.05


def dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)`` on binary masks; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask grids differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def densify(poly, step: float = DENSIFY_STEP_MM) -> np.ndarray:
    """Points along the closed polygon boundary, no two consecutive further apart than ``step``."""
    p = np.asarray(poly, dtype=np.float64)
    q = np.roll(p, -1, axis=0)
    pts = []
    for a, b in zip(p, q):
        n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
        t = np.arange(n)[:, None] / n
        pts.append(a + t * (b - a))
    return np.concatenate(pts, axis=0)


def hausdorff(poly_a, poly_b, step: float = DENSIFY_STEP_MM) -> float:
    """Symmetric Hausdorff distance between densified polygon boundaries."""
    for poly in (poly_a, poly_b):
        if len(poly) < 3 or polygon_area(poly) == 0.0:
            raise ValueError("degenerate polygon")
    pa, pb = densify(poly_a, step), densify(poly_b, step)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class CaseResult:
    slice_id: str
    dsc_wall: float
    hd_lumen_mm: float
    hd_outer_mm: float
    valid: bool = True


def evaluate_pair(pred: ContourPair, truth: ContourPair, grid: SliceGrid, slice_id="",
                  supersample: int = 4) -> CaseResult:
    pl, po = to_polygons(pred)
    tl, to = to_polygons(truth)
    dsc = dice(binary_wall(pred, grid, supersample), binary_wall(truth, grid, supersample))
    return CaseResult(str(slice_id), dsc, hausdorff(pl, tl), hausdorff(po, to))


def evaluate_pairs(preds, truths, grids, ids=None, supersample: int = 4) -> list[CaseResult]:
    ids = ids or [str(i) for i in range(len(preds))]
    return [evaluate_pair(p, t, g, i, supersample) for p, t, g, i in zip(preds, truths, grids, ids)]


def evaluate_volume(predictions: dict, truth, grid: SliceGrid, prefix: str = "",
                    supersample: int = 4) -> tuple[list[CaseResult], dict]:
    """Score predicted contours against phantom truth.

    ``predictions`` maps ``(vessel_index, slice)`` to a :class:`ContourPair`;
    slices without truth are skipped with a warning.
    """
    results = []
    for key in sorted(predictions):
        vi, k = key
        vessel = truth.vessels[vi]
        if not np.any(vessel.slices == k):
            warnings.warn(f"no truth for vessel {vi} slice {k}; skipped", stacklevel=2)
            continue
        t = vessel.contour(int(k), truth.angles)
        sid = f"{prefix}{vessel.label}_{int(k):04d}"
        results.append(evaluate_pair(predictions[key], t, grid, sid, supersample))
    return results, summarize(results)


def summarize(results: list[CaseResult]) -> dict:
    out = {"n": len(results)}
    for name in ("dsc_wall", "hd_lumen_mm", "hd_outer_mm"):
        vals = np.array([getattr(r, name) for r in results], dtype=np.float64)
        if vals.size == 0:
            out[name] = {"median": None, "q1": None, "q3": None, "iqr": None}
            continue
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out[name] = {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1)}
    return out


def write_csv(results: list[CaseResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice_id", "dsc_wall", "hd_lumen_mm", "hd_outer_mm"])
        for r in results:
            w.writerow([r.slice_id, f"{r.dsc_wall:.6f}", f"{r.hd_lumen_mm:.6f}", f"{r.hd_outer_mm:.6f}"])
    return path


def write_summary(summary: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return path
