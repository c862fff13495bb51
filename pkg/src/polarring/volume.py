"""3D scalar volumes: world mapping, normalization, sampling, mirroring, file I/O."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateVolumeWarning(UserWarning):
    """Raised (as a warning) when a volume has no intensity spread to normalize."""


@dataclass(frozen=True)
class Volume:
    """Scalar image indexed ``data[i, j, k]`` (x, y, z).

    Voxel ``(i, j, k)`` sits at world position ``origin + (i, j, k) * spacing``
    in millimetres.  On disk the values are written x-fastest.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D and non-empty, got shape {data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data) -> "Volume":
        return Volume(np.asarray(data), self.spacing, self.origin)

    def index_to_world(self, idx):
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_index(self, pt):
        pt = np.asarray(pt, dtype=float)
        return (pt - np.asarray(self.origin)) / np.asarray(self.spacing)

    def contains(self, pt) -> bool:
        """True if ``pt`` lies inside the bounding box of voxel centres."""
        idx = self.world_to_index(pt)
        return bool(np.all(idx >= 0) and np.all(idx <= np.asarray(self.dims) - 1))


def normalize_intensity(vol: Volume, low: float = 5.0, high: float = 95.0) -> Volume:
    """Map the ``low``/``high`` percentiles to 0/1 and clamp to [0, 1].

    A volume whose percentiles coincide comes back as zeros, with a
    :class:`DegenerateVolumeWarning`.
    """
    data = np.asarray(vol.data, dtype=np.float64)
    p_lo, p_hi = np.percentile(data, [low, high], method="linear")
    if p_hi == p_lo:
        warnings.warn(
            f"volume intensity percentiles coincide ({p_lo}); returning zeros",
            DegenerateVolumeWarning,
            stacklevel=2,
        )
        return vol.with_data(np.zeros(vol.dims, dtype=np.float32))
    out = np.clip((data - p_lo) / (p_hi - p_lo), 0.0, 1.0)
    return vol.with_data(out.astype(np.float32))


def sample_trilinear(vol: Volume, points) -> np.ndarray | float:
    """Trilinear interpolation at world points.

    ``points`` is a ``(3,)`` point or any ``(..., 3)`` array.  Points outside
    the box spanned by the voxel centres sample as 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    shape = pts.shape[:-1]
    idx = ((pts.reshape(-1, 3) - np.asarray(vol.origin)) / np.asarray(vol.spacing)).T
    dims = np.asarray(vol.dims)
    # small slack so points produced by floating-point arithmetic on the
    # outermost voxel centre still count as inside
    tol = 1e-9
    inside = np.all((idx >= -tol) & (idx <= (dims - 1)[:, None] + tol), axis=0)
    idx = np.clip(idx, 0, (dims - 1)[:, None])

    base = np.minimum(np.floor(idx).astype(np.int64), np.maximum(dims - 2, 0)[:, None])
    frac = idx - base
    nxt = np.minimum(base + 1, (dims - 1)[:, None])
    data = vol.data
    i0, j0, k0 = base
    i1, j1, k1 = nxt
    fx, fy, fz = frac

    c00 = data[i0, j0, k0] * (1 - fx) + data[i1, j0, k0] * fx
    c10 = data[i0, j1, k0] * (1 - fx) + data[i1, j1, k0] * fx
    c01 = data[i0, j0, k1] * (1 - fx) + data[i1, j0, k1] * fx
    c11 = data[i0, j1, k1] * (1 - fx) + data[i1, j1, k1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    val = np.where(inside, c0 * (1 - fz) + c1 * fz, 0.0)
    if scalar:
        return float(val[0])
    return val.reshape(shape)


def flip_sagittal(vol: Volume) -> Volume:
    """Mirror along x: voxel ``(i, j, k)`` moves to ``(m-1-i, j, k)``."""
    return vol.with_data(np.ascontiguousarray(vol.data[::-1, :, :]))


def save_volume(vol: Volume, path, **extra) -> Path:
    """Write ``<path>.vol.json`` and ``<path>.vol.raw`` (f32 little-endian, x fastest)."""
    base = _strip(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": "f32le",
    }
    header.update(extra)
    raw = np.asarray(vol.data, dtype="<f4").transpose(2, 1, 0).tobytes()
    Path(f"{base}.vol.raw").write_bytes(raw)
    Path(f"{base}.vol.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return base


def load_volume(path) -> Volume:
    base = _strip(path)
    header = json.loads(Path(f"{base}.vol.json").read_text())
    if header.get("dtype") != "f32le":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    m, n, p = header["dims"]
    flat = np.frombuffer(Path(f"{base}.vol.raw").read_bytes(), dtype="<f4")
    if flat.size != m * n * p:
        raise ValueError(f"raw file holds {flat.size} values, header declares {m * n * p}")
    data = flat.reshape(p, n, m).transpose(2, 1, 0).astype(np.float32)
    return Volume(np.ascontiguousarray(data), tuple(header["spacing_mm"]), tuple(header["origin_mm"]))


def read_volume_header(path) -> dict:
    return json.loads(Path(f"{_strip(path)}.vol.json").read_text())


def _strip(path) -> Path:
    s = str(path)
    for suffix in (".vol.json", ".vol.raw", ".vol"):
        if s.endswith(suffix):
            return Path(s[: -len(suffix)])
    return Path(s)
