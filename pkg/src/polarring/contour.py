"""Nested lumen/outer-wall contours, polygon conversion and sub-pixel rasterization."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def equidistant_angles(n: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n) / n


@dataclass(frozen=True)
class SliceGrid:
    """Pixel grid of one axial slice; pixel ``(i, j)`` is centred at ``origin + (i, j) * spacing``."""

    shape: tuple[int, int]
    spacing: tuple[float, float] = (1.0, 1.0)
    origin: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def from_volume(cls, vol) -> "SliceGrid":
        return cls(tuple(vol.dims[:2]), tuple(vol.spacing[:2]), tuple(vol.origin[:2]))

    def pixel_centers(self):
        xs = self.origin[0] + np.arange(self.shape[0]) * self.spacing[0]
        ys = self.origin[1] + np.arange(self.shape[1]) * self.spacing[1]
        return xs, ys


@dataclass
class ContourPair:
    """Lumen radii and wall thickness at equidistant angles around ``center``.

    The outer wall radius is always ``lumen_radii + thickness``, so the two
    contours cannot cross as long as ``thickness >= 0``.
    """

    lumen_radii: np.ndarray
    thickness: np.ndarray
    center: tuple[float, float, float]
    angles: np.ndarray | None = None
    slice_index: int | None = None

    def __post_init__(self):
        self.lumen_radii = np.asarray(self.lumen_radii, dtype=np.float64)
        self.thickness = np.asarray(self.thickness, dtype=np.float64)
        n = self.lumen_radii.shape[0]
        if self.angles is None:
            self.angles = equidistant_angles(n)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.thickness.shape != (n,) or self.angles.shape != (n,):
            raise ValueError("lumen_radii, thickness and angles must have equal length")
        if np.any(self.lumen_radii <= 0):
            raise ValueError("lumen radii must be positive")
        if np.any(self.thickness < 0):
            raise ValueError("thickness must be non-negative")
        self.center = tuple(float(c) for c in self.center)

    @classmethod
    def from_radii(cls, lumen_radii, outer_radii, center, angles=None, slice_index=None):
        lumen_radii = np.asarray(lumen_radii, dtype=np.float64)
        thickness = np.asarray(outer_radii, dtype=np.float64) - lumen_radii
        return cls(lumen_radii, thickness, center, angles, slice_index)

    @property
    def n_angles(self) -> int:
        return self.lumen_radii.shape[0]

    @property
    def outer_radii(self) -> np.ndarray:
        return self.lumen_radii + self.thickness

    def to_json(self) -> dict:
        return {
            "slice": self.slice_index,
            "center_mm": list(self.center),
            "angles_rad": self.angles.tolist(),
            "lumen_radii_mm": self.lumen_radii.tolist(),
            "thickness_mm": self.thickness.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ContourPair":
        return cls(obj["lumen_radii_mm"], obj["thickness_mm"], obj["center_mm"],
                   obj.get("angles_rad"), obj.get("slice"))


def radial_polygon(center, radii, angles) -> np.ndarray:
    """Vertices ``center + r_i (cos a_i, sin a_i)`` as an ``(N, 2)`` array."""
    radii = np.asarray(radii, dtype=np.float64)
    return np.stack([center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)], axis=1)


def to_polygons(cp: ContourPair) -> tuple[np.ndarray, np.ndarray]:
    lumen = radial_polygon(cp.center, cp.lumen_radii, cp.angles)
    outer = radial_polygon(cp.center, cp.outer_radii, cp.angles)
    return lumen, outer


def polygon_area(poly) -> float:
    """Signed-agnostic shoelace area."""
    x, y = np.asarray(poly, dtype=np.float64).T
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def points_in_polygon(points, poly) -> np.ndarray:
    """Even-odd rule; ``points`` is ``(M, 2)``."""
    points = np.asarray(points, dtype=np.float64)
    poly = np.asarray(poly, dtype=np.float64)
    px, py = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for a, b, c, d in zip(x1, y1, x2, y2):
        if b == d:
            continue
        crosses = (b > py) != (d > py)
        x_at = a + (py - b) * (c - a) / (d - b)
        inside ^= crosses & (px < x_at)
    return inside


def rasterize(poly, grid: SliceGrid, supersample: int = 4) -> np.ndarray:
    """Fractional coverage: share of ``s x s`` sub-pixel samples inside ``poly``."""
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    mask = np.zeros(grid.shape, dtype=np.float64)
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3 or polygon_area(poly) == 0.0:
        return mask
    sx, sy = grid.spacing
    ox, oy = grid.origin
    # pixel index range overlapped by the polygon's bounding box
    lo = np.floor((poly.min(axis=0) - (ox, oy)) / (sx, sy) + 0.5).astype(int) - 1
    hi = np.ceil((poly.max(axis=0) - (ox, oy)) / (sx, sy) - 0.5).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(grid.shape) - 1)
    if np.any(hi < lo):
        return mask
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    ii = np.arange(lo[0], hi[0] + 1)
    jj = np.arange(lo[1], hi[1] + 1)
    xs = (ox + (ii[:, None] + offs[None, :]) * sx).ravel()
    ys = (oy + (jj[:, None] + offs[None, :]) * sy).ravel()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    inside = points_in_polygon(np.stack([gx.ravel(), gy.ravel()], axis=1), poly)
    inside = inside.reshape(len(ii), s, len(jj), s)
    mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1] = inside.mean(axis=(1, 3))
    return mask


def binarize(mask) -> np.ndarray:
    return np.asarray(mask) >= 0.5


def wall_mask(cp: ContourPair, grid: SliceGrid, supersample: int = 4) -> np.ndarray:
    """Fractional ring between the lumen and outer contours (never negative)."""
    lumen, outer = to_polygons(cp)
    return np.clip(rasterize(outer, grid, supersample) - rasterize(lumen, grid, supersample), 0.0, None)


def binary_wall(cp: ContourPair, grid: SliceGrid, supersample: int = 4) -> np.ndarray:
    lumen, outer = to_polygons(cp)
    return binarize(rasterize(outer, grid, supersample)) & ~binarize(rasterize(lumen, grid, supersample))


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def count_crossings(poly_a, poly_b) -> int:
    """Number of proper edge-edge intersections between two closed polygons.

    Shared vertices and collinear touching (the degenerate ring case) do not count.
    """
    a = np.asarray(poly_a, dtype=np.float64)
    b = np.asarray(poly_b, dtype=np.float64)
    p1, p2 = a[:, None, :], np.roll(a, -1, axis=0)[:, None, :]
    q1, q2 = b[None, :, :], np.roll(b, -1, axis=0)[None, :, :]
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    return int(proper.sum())


def save_contours(contours, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([c.to_json() for c in contours], indent=1))
    return path


def load_contours(path) -> list[ContourPair]:
    return [ContourPair.from_json(o) for o in json.loads(Path(path).read_text())]


def write_pgm(image, path) -> Path:
    """8-bit binary PGM.  Floats are taken to lie in [0, 1]; the image is shown y-down."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    # rows = y, columns = x
    rows = np.ascontiguousarray(img.T)
    h, w = rows.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + rows.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    rows = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
    return rows.T.copy()
