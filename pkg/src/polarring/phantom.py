"""Synthetic black-blood vessel phantoms with analytic ground truth.

Each vessel is a tube whose axial cross-section is star-convex around the
centreline point of that slice: a lumen radius function ``r(theta, z)`` and a
non-negative wall thickness ``t(theta, z)`` that carries a Gaussian plaque bump.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .contour import ContourPair, SliceGrid, binarize, equidistant_angles, rasterize, to_polygons
from .volume import Volume

INTERNAL, EXTERNAL = "internal", "external"


@dataclass
class PhantomConfig:
    """Generator settings.  ``(lo, hi)`` pairs are sampled uniformly per vessel."""

    dims: tuple[int, int, int] = (40, 40, 32)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    vessel_count: int = 1
    lumen_radius_mm: tuple[float, float] = (2.0, 3.0)
    lumen_radius_variation_mm: tuple[float, float] = (0.0, 0.3)
    ellipticity: tuple[float, float] = (0.0, 0.12)
    thickness_mm: tuple[float, float] = (0.9, 1.5)
    plaque_amplitude_mm: tuple[float, float] = (0.0, 1.0)
    plaque_angular_width_rad: float = 0.6
    plaque_axial_extent_mm: float = 3.0
    plaque_center_slice: int | None = None
    plaque_angle_rad: float | None = None
    center_amplitude_mm: tuple[float, float] = (0.0, 1.5)
    center_period_mm: tuple[float, float] = (16.0, 40.0)
    center_offset_mm: tuple[float, float] = (-1.0, 1.0)
    branch_fraction: float = 0.4
    branch_separation_rate: float = 0.6
    external_scale: float = 0.75
    lumen_intensity: float = 40.0
    wall_intensity: float = 200.0
    background_intensity: float = 110.0
    noise_sigma: float = 8.0
    truth_angles: int = 31
    margin_voxels: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "spacing", "origin", "lumen_radius_mm", "lumen_radius_variation_mm",
                     "ellipticity", "thickness_mm", "plaque_amplitude_mm", "center_amplitude_mm",
                     "center_period_mm", "center_offset_mm"):
            setattr(self, name, tuple(getattr(self, name)))
        self.dims = tuple(int(d) for d in self.dims)

    def validate(self):
        if self.vessel_count not in (1, 2):
            raise ValueError("vessel_count must be 1 or 2")
        if any(d < 1 for d in self.dims) or any(s <= 0 for s in self.spacing):
            raise ValueError("dims must be >= 1 and spacing > 0")
        for name in ("lumen_radius_mm", "lumen_radius_variation_mm", "ellipticity", "thickness_mm",
                     "plaque_amplitude_mm", "center_amplitude_mm", "center_period_mm"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if self.lumen_radius_mm[0] <= 0:
            raise ValueError("minimum lumen radius must be positive")
        if self.thickness_mm[0] < 0:
            raise ValueError("minimum wall thickness must be >= 0")
        if self.lumen_radius_variation_mm[1] >= self.lumen_radius_mm[0]:
            raise ValueError("lumen radius variation must stay below the minimum lumen radius")
        if self.ellipticity[0] < 0 or self.ellipticity[1] >= 0.5:
            raise ValueError("ellipticity must lie in [0, 0.5)")
        if self.center_period_mm[0] <= 0:
            raise ValueError("center period must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.truth_angles < 3:
            raise ValueError("truth_angles must be >= 3")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomConfig":
        obj = dict(obj)
        obj.pop("version", None)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown phantom config fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Vessel:
    """Analytic tube.  Angles are measured in the axial plane from +x toward +y."""

    label: str
    z_start: float
    z_end: float
    base_center: tuple[float, float]
    amplitude: tuple[float, float]
    period: float
    phase: tuple[float, float]
    lumen_radius: float
    radius_variation: float
    radius_phase: float
    ellipticity: float
    ellipse_angle: float
    thickness: float
    plaque_amplitude: float
    plaque_angle: float
    plaque_z: float
    plaque_angular_width: float
    plaque_axial_extent: float
    parent: "Vessel | None" = None
    branch_direction: tuple[float, float] = (1.0, 0.0)
    separation_rate: float = 0.0

    def active(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return (z >= self.z_start - 1e-9) & (z <= self.z_end + 1e-9)

    def center(self, z):
        z = np.asarray(z, dtype=np.float64)
        w = 2.0 * np.pi * z / self.period
        x = self.base_center[0] + self.amplitude[0] * np.sin(w + self.phase[0])
        y = self.base_center[1] + self.amplitude[1] * np.sin(w + self.phase[1])
        if self.parent is not None:
            px, py = self.parent.center(z)
            offset = self.separation_rate * np.maximum(z - self.z_start, 0.0)
            x = px + self.branch_direction[0] * offset
            y = py + self.branch_direction[1] * offset
        return x, y

    def lumen_radius_at(self, theta, z):
        theta = np.asarray(theta, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        base = self.lumen_radius + self.radius_variation * np.sin(2.0 * np.pi * z / self.period + self.radius_phase)
        return base * (1.0 + self.ellipticity * np.cos(2.0 * (theta - self.ellipse_angle)))

    def thickness_at(self, theta, z):
        theta = np.asarray(theta, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        dtheta = np.angle(np.exp(1j * (theta - self.plaque_angle)))
        bump = np.exp(-0.5 * (dtheta / self.plaque_angular_width) ** 2
                      - 0.5 * ((z - self.plaque_z) / self.plaque_axial_extent) ** 2)
        return self.thickness + self.plaque_amplitude * bump

    def max_outer_radius(self, z) -> float:
        theta = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)
        return float(np.max(self.lumen_radius_at(theta, z) + self.thickness_at(theta, z)))


@dataclass
class VesselTruth:
    label: str
    slices: np.ndarray
    centerline: np.ndarray
    lumen_radii: np.ndarray
    thickness: np.ndarray

    def contour(self, slice_index: int, angles) -> ContourPair:
        pos = np.flatnonzero(self.slices == slice_index)
        if pos.size == 0:
            raise KeyError(f"vessel {self.label!r} does not cross slice {slice_index}")
        p = int(pos[0])
        return ContourPair(self.lumen_radii[p], self.thickness[p], tuple(self.centerline[p]),
                           angles, slice_index)


@dataclass
class PhantomTruth:
    angles: np.ndarray
    vessels: list[VesselTruth]
    analytic: list[Vessel] = field(default_factory=list, repr=False)

    def contours_at(self, slice_index: int, label: str | None = None) -> list[tuple[int, ContourPair]]:
        out = []
        for vi, v in enumerate(self.vessels):
            if label is not None and v.label != label:
                continue
            if np.any(v.slices == slice_index):
                out.append((vi, v.contour(slice_index, self.angles)))
        return out

    def to_json(self) -> dict:
        return {
            "version": 1,
            "angles_rad": self.angles.tolist(),
            "vessels": [
                {
                    "label": v.label,
                    "slices": v.slices.tolist(),
                    "centerline_mm": v.centerline.tolist(),
                    "lumen_radii_mm": v.lumen_radii.tolist(),
                    "thickness_mm": v.thickness.tolist(),
                }
                for v in self.vessels
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomTruth":
        vessels = [
            VesselTruth(
                v["label"],
                np.asarray(v["slices"], dtype=int),
                np.asarray(v["centerline_mm"], dtype=np.float64).reshape(-1, 3),
                np.asarray(v["lumen_radii_mm"], dtype=np.float64),
                np.asarray(v["thickness_mm"], dtype=np.float64),
            )
            for v in obj["vessels"]
        ]
        return cls(np.asarray(obj["angles_rad"], dtype=np.float64), vessels)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path) -> "PhantomTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _sample_vessels(cfg: PhantomConfig, rng) -> list[Vessel]:
    m, n, p = cfg.dims
    sx, sy, sz = cfg.spacing
    ox, oy, oz = cfg.origin
    z0, z1 = oz, oz + (p - 1) * sz
    cx = ox + 0.5 * (m - 1) * sx + _uniform(rng, cfg.center_offset_mm)
    cy = oy + 0.5 * (n - 1) * sy + _uniform(rng, cfg.center_offset_mm)
    if cfg.plaque_center_slice is None:
        plaque_z = oz + float(rng.uniform(0, p - 1)) * sz
    else:
        plaque_z = oz + cfg.plaque_center_slice * sz
    plaque_angle = float(rng.uniform(0, 2 * np.pi)) if cfg.plaque_angle_rad is None else cfg.plaque_angle_rad

    internal = Vessel(
        label=INTERNAL,
        z_start=z0,
        z_end=z1,
        base_center=(cx, cy),
        amplitude=(_uniform(rng, cfg.center_amplitude_mm), _uniform(rng, cfg.center_amplitude_mm)),
        period=_uniform(rng, cfg.center_period_mm),
        phase=(float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi))),
        lumen_radius=_uniform(rng, cfg.lumen_radius_mm),
        radius_variation=_uniform(rng, cfg.lumen_radius_variation_mm),
        radius_phase=float(rng.uniform(0, 2 * np.pi)),
        ellipticity=_uniform(rng, cfg.ellipticity),
        ellipse_angle=float(rng.uniform(0, np.pi)),
        thickness=_uniform(rng, cfg.thickness_mm),
        plaque_amplitude=_uniform(rng, cfg.plaque_amplitude_mm),
        plaque_angle=plaque_angle,
        plaque_z=plaque_z,
        plaque_angular_width=cfg.plaque_angular_width_rad,
        plaque_axial_extent=cfg.plaque_axial_extent_mm,
    )
    vessels = [internal]
    if cfg.vessel_count == 2:
        branch_z = oz + round(cfg.branch_fraction * (p - 1)) * sz
        direction = float(rng.uniform(0, 2 * np.pi))
        vessels.append(Vessel(
            label=EXTERNAL,
            z_start=branch_z,
            z_end=z1,
            base_center=(cx, cy),
            amplitude=(0.0, 0.0),
            period=internal.period,
            phase=(0.0, 0.0),
            lumen_radius=cfg.external_scale * _uniform(rng, cfg.lumen_radius_mm),
            radius_variation=cfg.external_scale * _uniform(rng, cfg.lumen_radius_variation_mm),
            radius_phase=float(rng.uniform(0, 2 * np.pi)),
            ellipticity=_uniform(rng, cfg.ellipticity),
            ellipse_angle=float(rng.uniform(0, np.pi)),
            thickness=cfg.external_scale * _uniform(rng, cfg.thickness_mm),
            plaque_amplitude=0.0,
            plaque_angle=0.0,
            plaque_z=branch_z,
            plaque_angular_width=cfg.plaque_angular_width_rad,
            plaque_axial_extent=cfg.plaque_axial_extent_mm,
            parent=internal,
            branch_direction=(float(np.cos(direction)), float(np.sin(direction))),
            separation_rate=cfg.branch_separation_rate,
        ))
    return vessels


def _check_containment(cfg: PhantomConfig, vessels: list[Vessel]):
    m, n, p = cfg.dims
    sx, sy, sz = cfg.spacing
    ox, oy, oz = cfg.origin
    lo = np.array([ox, oy]) + cfg.margin_voxels * np.array([sx, sy])
    hi = np.array([ox + (m - 1) * sx, oy + (n - 1) * sy]) - cfg.margin_voxels * np.array([sx, sy])
    zs = oz + np.arange(p) * sz
    for v in vessels:
        for z in zs[v.active(zs)]:
            c = np.array(v.center(z))
            r = v.max_outer_radius(z)
            if np.any(c - r < lo) or np.any(c + r > hi):
                raise ValueError(
                    f"{v.label} vessel leaves the volume at z={z:.2f} mm: centre "
                    f"({c[0]:.2f}, {c[1]:.2f}) with outer radius {r:.2f} mm does not fit inside "
                    f"[{lo[0]:.2f}, {hi[0]:.2f}] x [{lo[1]:.2f}, {hi[1]:.2f}]; reduce radii, "
                    f"centreline amplitude or offset, or enlarge the volume"
                )


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, PhantomTruth]:
    """Build a noisy phantom volume and its exact ground truth; seed-deterministic."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    vessels = _sample_vessels(cfg, rng)
    _check_containment(cfg, vessels)

    m, n, p = cfg.dims
    sx, sy, sz = cfg.spacing
    ox, oy, oz = cfg.origin
    xs = ox + np.arange(m) * sx
    ys = oy + np.arange(n) * sy
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    lumen = np.zeros(cfg.dims, dtype=bool)
    outer = np.zeros(cfg.dims, dtype=bool)
    for k in range(p):
        z = oz + k * sz
        for v in vessels:
            if not v.active(z):
                continue
            cx, cy = v.center(z)
            dx, dy = gx - cx, gy - cy
            d = np.hypot(dx, dy)
            theta = np.arctan2(dy, dx)
            rl = v.lumen_radius_at(theta, z)
            lumen[:, :, k] |= d < rl
            outer[:, :, k] |= d < rl + v.thickness_at(theta, z)

    data = np.full(cfg.dims, cfg.background_intensity, dtype=np.float64)
    data[outer] = cfg.wall_intensity
    data[lumen] = cfg.lumen_intensity
    if cfg.noise_sigma > 0:
        data = data + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    vol = Volume(data.astype(np.float32), cfg.spacing, cfg.origin)

    angles = equidistant_angles(cfg.truth_angles)
    truths = []
    for v in vessels:
        ks = np.array([k for k in range(p) if v.active(oz + k * sz)], dtype=int)
        zs = oz + ks * sz
        cx, cy = v.center(zs)
        centerline = np.stack([np.broadcast_to(cx, zs.shape), np.broadcast_to(cy, zs.shape), zs], axis=1)
        lumen_r = v.lumen_radius_at(angles[None, :], zs[:, None])
        thick = v.thickness_at(angles[None, :], zs[:, None])
        truths.append(VesselTruth(v.label, ks, centerline, lumen_r, thick))
    return vol, PhantomTruth(angles, truths, vessels)


def rasterize_truth_masks(truth: PhantomTruth, vol: Volume, slice_index: int, supersample: int = 4,
                          label: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Binary lumen and outer-wall masks of one slice (union over vessels)."""
    grid = SliceGrid.from_volume(vol)
    lumen = np.zeros(grid.shape, dtype=bool)
    outer = np.zeros(grid.shape, dtype=bool)
    for _, cp in truth.contours_at(slice_index, label):
        lp, op = to_polygons(cp)
        lumen |= binarize(rasterize(lp, grid, supersample))
        outer |= binarize(rasterize(op, grid, supersample))
    return lumen, outer


def save_phantom(vol: Volume, truth: PhantomTruth, directory, cfg: PhantomConfig | None = None) -> Path:
    from .volume import save_volume

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(vol, directory / "volume")
    truth.save(directory / "truth.json")
    if cfg is not None:
        (directory / "phantom_config.json").write_text(
            json.dumps({"version": 1, **cfg.to_json()}, indent=2, sort_keys=True))
    return directory


def load_phantom(directory) -> tuple[Volume, PhantomTruth]:
    from .volume import load_volume

    directory = Path(directory)
    return load_volume(directory / "volume"), PhantomTruth.load(directory / "truth.json")
