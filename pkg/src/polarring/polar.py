"""Ray-cast polar resampling around a centre point.

A polar image has ``2N - 1`` rows: the ``N`` canonical rays at angles
``2 pi i / N`` wrapped by copies of the last ``N // 2`` rays in front and
the first ``N - 1 - N // 2`` rays behind, so valid convolutions see the
angular wrap-around.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contour import ContourPair, equidistant_angles, points_in_polygon, to_polygons
from .volume import Volume, sample_trilinear, save_volume


@dataclass(frozen=True)
class PolarGrid:
    n_angles: int = 31
    n_samples: int = 127
    ray_spacing: float = 0.25

    def __post_init__(self):
        if self.n_angles < 4:
            raise ValueError("need at least 4 angles")
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples per ray")
        if self.ray_spacing <= 0:
            raise ValueError("ray spacing must be positive")

    @property
    def angles(self) -> np.ndarray:
        return equidistant_angles(self.n_angles)

    @property
    def radii(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.ray_spacing

    @property
    def lead(self) -> int:
        """Number of wrapped rows in front of the canonical block."""
        return self.n_angles // 2

    @property
    def rows(self) -> int:
        return 2 * self.n_angles - 1


@dataclass
class PolarImage:
    data: np.ndarray
    center: tuple[float, float, float]
    grid: PolarGrid
    slice_index: int | None = None

    @property
    def canonical(self) -> np.ndarray:
        h = self.grid.lead
        return self.data[h:h + self.grid.n_angles]

    def save(self, path):
        """Same raw+JSON layout as volumes, dims ``(2N-1, R, S)``."""
        data = self.data if self.data.ndim == 3 else self.data[:, :, None]
        vol = Volume(data, (1.0, self.grid.ray_spacing, 1.0))
        return save_volume(vol, path, kind="polar", n_angles=self.grid.n_angles,
                           ray_spacing_mm=self.grid.ray_spacing, center_mm=list(self.center),
                           slice=self.slice_index)


def pad_periodic(canonical: np.ndarray) -> np.ndarray:
    """Wrap the angle axis (axis 0) to ``2N - 1`` rows."""
    n = canonical.shape[0]
    lead = n // 2
    trail = n - 1 - lead
    return np.concatenate([canonical[n - lead:], canonical, canonical[:trail]], axis=0)


def _sampler(source):
    if isinstance(source, Volume):
        return lambda pts: sample_trilinear(source, pts)
    return source


def _ray_points(center, grid: PolarGrid, z_offsets) -> np.ndarray:
    ang = grid.angles
    r = grid.radii
    pts = np.empty((grid.n_angles, grid.n_samples, len(z_offsets), 3))
    pts[..., 0] = center[0] + (np.cos(ang)[:, None] * r[None, :])[:, :, None]
    pts[..., 1] = center[1] + (np.sin(ang)[:, None] * r[None, :])[:, :, None]
    pts[..., 2] = center[2] + np.asarray(z_offsets)[None, None, :]
    return pts


def cast_polar_stack(source, center, grid: PolarGrid, k: int = 0, slice_index=None) -> PolarImage:
    """Cast ``2k + 1`` polar planes at axial offsets ``-k .. k`` voxels.

    ``source`` is a :class:`Volume` or a callable mapping ``(..., 3)`` world
    points to intensities.  Planes outside the volume sample as zeros.
    """
    center = tuple(float(c) for c in center)
    if isinstance(source, Volume):
        if not source.contains(center):
            raise ValueError(f"polar centre {center} lies outside the volume")
        sz = source.spacing[2]
    else:
        sz = 1.0
    if k < 0:
        raise ValueError("k must be >= 0")
    offsets = np.arange(-k, k + 1) * sz
    vals = np.asarray(_sampler(source)(_ray_points(center, grid, offsets)), dtype=np.float32)
    return PolarImage(pad_periodic(vals), center, grid, slice_index)


def cast_polar(source, center, grid: PolarGrid, slice_index=None) -> PolarImage:
    """Single-plane polar image of shape ``(2N - 1, R)``."""
    img = cast_polar_stack(source, center, grid, 0, slice_index)
    img.data = img.data[:, :, 0]
    return img


def jitter_center(center, max_radius: float, seed=None):
    """Uniform sample from the axial disk of radius ``max_radius`` around ``center``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if max_radius < 0:
        raise ValueError("max_radius must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u, v = rng.random(2)
    if max_radius == 0:
        return tuple(float(c) for c in center)
    r = max_radius * np.sqrt(u)
    t = 2.0 * np.pi * v
    return (float(center[0] + r * np.cos(t)), float(center[1] + r * np.sin(t)), float(center[2]))


def ray_polygon_distance(origin, directions, poly) -> np.ndarray:
    """Distance along each unit ray to its first crossing with a closed polygon."""
    o = np.asarray(origin, dtype=np.float64)[:2]
    d = np.asarray(directions, dtype=np.float64)
    p = np.asarray(poly, dtype=np.float64)
    q = np.roll(p, -1, axis=0)
    e = q - p
    w = p - o
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        s = (w[None, :, 0] * d[:, None, 1] - w[None, :, 1] * d[:, None, 0]) / denom
    ok = (denom != 0) & (s >= -1e-12) & (s <= 1 + 1e-12) & (t > 0)
    t = np.where(ok, t, np.inf)
    out = t.min(axis=1)
    if np.any(~np.isfinite(out)):
        raise ValueError("ray does not intersect the contour")
    return out


def radii_from_truth(truth: ContourPair, center, grid: PolarGrid) -> tuple[np.ndarray, np.ndarray]:
    """Lumen and outer radii seen from ``center`` along the grid's angles.

    The truth contours are the polygons through their own radial vertices.
    """
    lumen_poly, outer_poly = to_polygons(truth)
    if not points_in_polygon(np.asarray(center, dtype=np.float64)[None, :2], lumen_poly)[0]:
        raise ValueError(f"centre {tuple(center)} is not inside the lumen contour")
    ang = grid.angles
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return ray_polygon_distance(center, dirs, lumen_poly), ray_polygon_distance(center, dirs, outer_poly)

