"""End-to-end phantom pipeline: generate, trace, train, predict, evaluate."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .centerline import CHANNELS, CenterlinePath, MapNoise, degrade_map, proximity_map, trace_with_waypoints
from .contour import ContourPair, SliceGrid, radial_polygon, write_pgm
from .metrics import CaseResult, evaluate_pair, summarize, write_csv, write_summary
from .phantom import PhantomConfig, PhantomTruth, generate_phantom, save_phantom
from .polar import jitter_center
from .segmenter import MULTI, ModelConfig, PolarSegmenter, build_model, predict_many, train, training_slices
from .volume import Volume, normalize_intensity, save_volume

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


def desk_model_config(**overrides) -> ModelConfig:
    """Model settings sized for CPU training on the default phantoms."""
    base = dict(mode=MULTI, augment=True, n_samples=31, ray_spacing=0.35, channels=16,
                epochs=12, batch_size=16, micro_batch=16)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    n_phantoms: int = 20
    n_test: int = 4
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=desk_model_config)
    noise: MapNoise = field(default_factory=lambda: MapNoise(sigma_add=2.0))
    a: float = 6.0
    d_max: float = 5.0
    stride: int = 50
    supersample: int = 4
    overlays: int = 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        if obj.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {obj.get('version')!r}")
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "phantom" in obj:
            obj["phantom"] = PhantomConfig.from_json(obj["phantom"])
        if "model" in obj:
            model = desk_model_config().to_json()
            extra = set(obj["model"]) - set(model)
            if extra:
                raise ValueError(f"unknown model config fields: {sorted(extra)}")
            model.update(obj["model"])
            obj["model"] = ModelConfig.from_json(model)
        if "noise" in obj:
            extra = set(obj["noise"]) - {f.name for f in fields(MapNoise)}
            if extra:
                raise ValueError(f"unknown noise fields: {sorted(extra)}")
            obj["noise"] = MapNoise(**obj["noise"])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit child seed for a stage/item of a run."""
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def threads() -> int:
    try:
        return max(1, int(os.environ.get("POLARRING_THREADS", "1")))
    except ValueError:
        return 1


def make_phantoms(cfg: PipelineConfig) -> list[tuple[Volume, PhantomTruth]]:
    out = []
    for i in range(cfg.n_phantoms):
        pcfg = PhantomConfig.from_json({**cfg.phantom.to_json(), "seed": derive_seed(cfg.seed, 1, i)})
        out.append(generate_phantom(pcfg))
    return out


def build_maps(truth: PhantomTruth, vol: Volume, cfg: PipelineConfig, index: int):
    pmap = proximity_map(truth, vol, cfg.a, cfg.d_max)
    return degrade_map(pmap, cfg.noise, derive_seed(cfg.seed, 2, index))


def trace_phantom(pmap, truth: PhantomTruth, stride: int) -> dict[int, CenterlinePath]:
    """Trace every channel that carries a vessel; keyed by vessel index."""
    paths = {}
    for vi, v in enumerate(truth.vessels):
        paths[vi] = trace_with_waypoints(pmap[v.label], stride, v.label)
    return paths


def predict_along(model, vol: Volume, path: CenterlinePath) -> dict[int, ContourPair]:
    centers = path.centers_by_slice()
    ks = sorted(centers)
    preds = predict_many(model, vol, [centers[k] for k in ks], ks)
    return dict(zip(ks, preds))


def evaluate_predictions(preds: dict, truth: PhantomTruth, grid: SliceGrid, prefix: str,
                         supersample: int) -> list[CaseResult]:
    jobs = []
    for (vi, k), cp in sorted(preds.items()):
        v = truth.vessels[vi]
        if not np.any(v.slices == k):
            log.warning("no truth for %s slice %d; skipped", v.label, k)
            continue
        jobs.append((cp, v.contour(int(k), truth.angles), f"{prefix}{v.label}_{int(k):04d}"))
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        return list(pool.map(lambda j: evaluate_pair(j[0], j[1], grid, j[2], supersample), jobs))


def emit_overlay(slice_image, contours, grid: SliceGrid, path, levels=(255, 0)) -> Path:
    """8-bit slice with each contour's lumen/outer polygon burned in at ``levels``."""
    img = np.clip(np.round(np.asarray(slice_image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    for cp in contours:
        for radii, level in ((cp.lumen_radii, levels[0]), (cp.outer_radii, levels[1])):
            poly = radial_polygon(cp.center, radii, cp.angles)
            for i, j in polygon_pixels(poly, grid):
                img[i, j] = level
    return write_pgm(img, path)


def polygon_pixels(poly, grid: SliceGrid) -> list[tuple[int, int]]:
    """Bresenham trace of a closed polygon in pixel coordinates, clipped to the grid."""
    pix = np.rint((np.asarray(poly) - grid.origin) / grid.spacing).astype(int)
    out = []
    for a, b in zip(pix, np.roll(pix, -1, axis=0)):
        out.extend(_bresenham(*a, *b))
    m, n = grid.shape
    return [(i, j) for i, j in out if 0 <= i < m and 0 <= j < n]


def _bresenham(x0, y0, x1, y1):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pts = []
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def train_on(phantoms, model_cfg: ModelConfig, progress=None):
    """Train one model on ``[(normalized volume, truth), ...]``."""
    model = build_model(model_cfg)
    return train(model, training_slices(phantoms), model_cfg, progress=progress)


def run_e2e(cfg: PipelineConfig, out_dir, progress=None) -> dict:
    """Run every stage and write artifacts under ``out_dir``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))

    phantoms = make_phantoms(cfg)
    normalized = [(normalize_intensity(v), t) for v, t in phantoms]
    n_train = cfg.n_phantoms - cfg.n_test
    if n_train < 1 or cfg.n_test < 1:
        raise ValueError("need at least one training and one test phantom")
    for i, (vol, truth) in enumerate(phantoms):
        save_phantom(vol, truth, out / "phantoms" / f"p{i:03d}")

    model_cfg = ModelConfig.from_json({**cfg.model.to_json(), "seed": derive_seed(cfg.seed, 3)})
    model, record = train_on(normalized[:n_train], model_cfg, progress)
    model.save(out / "model")
    (out / "model" / "train_record.json").write_text(
        json.dumps([{k: v for k, v in e.items() if k != "seconds"} for e in record.epochs], indent=1))

    results = []
    for i in range(n_train, cfg.n_phantoms):
        vol, truth = normalized[i]
        pdir = out / "phantoms" / f"p{i:03d}"
        pmap = build_maps(truth, vol, cfg, i)
        for name in CHANNELS:
            save_volume(pmap[name], pdir / f"proximity_{name}")
        paths = trace_phantom(pmap, truth, cfg.stride)
        preds = {}
        for vi, path in paths.items():
            path.save(pdir / f"centerline_{truth.vessels[vi].label}.json")
            for k, cp in predict_along(model, vol, path).items():
                preds[(vi, k)] = cp
        (pdir / "contours.json").write_text(json.dumps(
            [{"vessel": truth.vessels[vi].label, **cp.to_json()} for (vi, k), cp in sorted(preds.items())]))
        grid = SliceGrid.from_volume(vol)
        results.extend(evaluate_predictions(preds, truth, grid, f"p{i:03d}_", cfg.supersample))
        for k in _overlay_slices(truth, cfg.overlays):
            cps = [cp for (vi, kk), cp in preds.items() if kk == k]
            emit_overlay(vol.data[:, :, k], cps, grid, out / "overlays" / f"p{i:03d}_k{k:03d}.pgm")

    write_csv(results, out / "metrics.csv")
    summary = summarize(results)
    write_summary(summary, out / "summary.json")
    return summary


def offset_evaluation(model, phantoms, max_offset_mm: float, seed: int = 0,
                      supersample: int = 4) -> list[CaseResult]:
    """Score predictions made around centres displaced uniformly within ``max_offset_mm``."""
    rng = np.random.default_rng(seed)
    results = []
    for i, (vol, truth) in enumerate(phantoms):
        grid = SliceGrid.from_volume(vol)
        for v in truth.vessels:
            ks = [int(k) for k in v.slices]
            truths = [v.contour(k, truth.angles) for k in ks]
            centers = [jitter_center(t.center, max_offset_mm, rng) for t in truths]
            preds = predict_many(model, vol, centers, ks)
            results.extend(evaluate_pair(p, t, grid, f"p{i:03d}_{v.label}_{k:04d}", supersample)
                           for p, t, k in zip(preds, truths, ks))
    return results


ABLATION_VARIANTS = {
    "single_aug_off": dict(mode="single", augment=False),
    "single_aug_on": dict(mode="single", augment=True),
    "multi_aug_off": dict(mode="multi", augment=False),
}


def run_ablation(cfg: PipelineConfig, offset_voxels: float = 3.0, variants=None, progress=None) -> dict:
    """Median wall DSC under test-time centre offsets for each training variant."""
    phantoms = [(normalize_intensity(v), t) for v, t in make_phantoms(cfg)]
    n_train = cfg.n_phantoms - cfg.n_test
    max_offset = offset_voxels * max(cfg.phantom.spacing[:2])
    out = {}
    for name, overrides in (variants or ABLATION_VARIANTS).items():
        model_cfg = ModelConfig.from_json({**cfg.model.to_json(), **overrides, "seed": derive_seed(cfg.seed, 3)})
        model, _ = train_on(phantoms[:n_train], model_cfg)
        res = offset_evaluation(model, phantoms[n_train:], max_offset, derive_seed(cfg.seed, 4), cfg.supersample)
        out[name] = summarize(res)
        if progress is not None:
            progress(name, out[name])
    return out


def _overlay_slices(truth: PhantomTruth, count: int) -> list[int]:
    if count <= 0 or not truth.vessels:
        return []
    ks = truth.vessels[0].slices
    picks = np.linspace(0, len(ks) - 1, count + 2)[1:-1].round().astype(int)
    return [int(ks[i]) for i in picks]
