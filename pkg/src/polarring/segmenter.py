"""Rotation-equivariant polar regression of nested lumen/outer-wall contours.

The network is a stack of valid dilated convolutions over the periodically
padded polar image.  Along the angle axis the dilation doubles each layer
until the ``2N - 1`` rows have shrunk to exactly ``N``; along the ray it
doubles until the ``R`` samples collapse to one.  No pooling is used, so a
cyclic shift of the input rays shifts the output by the same amount.

The head emits two non-negative channels per angle: the lumen radius and the
wall thickness, both in ray-sample units.  The outer radius is their sum.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .contour import ContourPair, SliceGrid
from .neuralnet import AdamState, ConvLayer, Network, adam_step, load_network, save_network, smooth_l1
from .polar import PolarGrid, cast_polar_stack, jitter_center, pad_periodic, radii_from_truth
from .volume import Volume

log = logging.getLogger(__name__)

SINGLE, MULTI = "single", "multi"
MIN_LUMEN_SAMPLES = 1e-6


@dataclass
class ModelConfig:
    mode: str = SINGLE
    n_angles: int = 31
    n_samples: int = 127
    ray_spacing: float = 0.25
    stack_k: int = 3
    channels: int = 32
    kernel: int = 3
    augment: bool = False
    jitter_mm: float | None = None
    jitter_fraction: float = 0.4
    batch_size: int = 100
    micro_batch: int = 25
    epochs: int = 200
    lr: float = 1e-3
    beta: float = 1.0
    init_lumen_mm: float = 2.5
    init_thickness_mm: float = 1.2
    seed: int = 0

    @property
    def grid(self) -> PolarGrid:
        return PolarGrid(self.n_angles, self.n_samples, self.ray_spacing)

    @property
    def slices(self) -> int:
        return 2 * self.stack_k + 1 if self.mode == MULTI else 1

    @property
    def stack(self) -> int:
        return self.stack_k if self.mode == MULTI else 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj.pop("version", None)
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**obj)


def _doubling_layers(extent: int, kernel: int, what: str) -> int:
    """Number of layers with dilations 1, 2, 4, ... whose footprint is ``extent - 1``."""
    shrink = extent - 1
    if shrink == 0:
        return 0
    steps = shrink / (kernel - 1)
    layers = math.log2(steps + 1)
    if steps != int(steps) or layers != int(layers):
        raise ValueError(
            f"{what}: a doubling-dilation stack of kernel {kernel} cannot shrink {extent} to 1 step "
            f"(needs (kernel-1)*(2^L-1) == {shrink})"
        )
    return int(layers)


def layer_schedule(cfg: ModelConfig) -> list[dict]:
    """Kernel sizes and dilations of the hidden layers."""
    if cfg.mode not in (SINGLE, MULTI):
        raise ValueError(f"mode must be {SINGLE!r} or {MULTI!r}")
    if cfg.kernel < 3 or cfg.kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 3")
    # angular budget: 2N - 1 padded rows must shrink to exactly N
    n = cfg.n_angles
    if n % 2 == 0:
        raise ValueError("angular budget needs an odd number of angles")
    la = _doubling_layers(n, cfg.kernel, f"angular budget 2N-1={2 * n - 1} -> N={n}")
    if (cfg.kernel - 1) * (2 ** la - 1) > 2 * (n - 1):
        raise ValueError("angular footprint exceeds the padding budget 2(N-1)")
    lr = _doubling_layers(cfg.n_samples, cfg.kernel, f"radial budget R={cfg.n_samples} -> 1")
    ls = cfg.stack if cfg.mode == MULTI else 0
    depth = max(la, lr, ls, 1)
    sched = []
    for l in range(depth):
        sched.append({
            "kernel": (cfg.kernel if l < la else 1, cfg.kernel if l < lr else 1, 3 if l < ls else 1),
            "dilation": (2 ** l if l < la else 1, 2 ** l if l < lr else 1, 1),
        })
    return sched


def _inv_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def build_model(cfg: ModelConfig, seed: int | None = None) -> "PolarSegmenter":
    """Randomly initialized network for ``cfg``; identical seeds give identical weights."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    layers = []
    cin = 1
    for spec in layer_schedule(cfg):
        ka, kr, ks = spec["kernel"]
        fan_in = ka * kr * ks * cin
        w = rng.standard_normal((ka, kr, ks, cin, cfg.channels)) * math.sqrt(2.0 / fan_in)
        layers.append(ConvLayer(w.astype(np.float32), np.zeros(cfg.channels, np.float32),
                                spec["dilation"], "leaky"))
        cin = cfg.channels
    head_w = rng.standard_normal((1, 1, 1, cin, 2)) * (0.1 / math.sqrt(cin))
    head_b = np.array([_inv_softplus(cfg.init_lumen_mm / cfg.ray_spacing),
                       _inv_softplus(cfg.init_thickness_mm / cfg.ray_spacing)])
    layers.append(ConvLayer(head_w.astype(np.float32), head_b.astype(np.float32), (1, 1, 1), "softplus"))
    return PolarSegmenter(Network(layers), cfg)


@dataclass
class PolarSegmenter:
    network: Network
    config: ModelConfig

    @property
    def grid(self) -> PolarGrid:
        return self.config.grid

    def forward(self, polar: np.ndarray) -> np.ndarray:
        """``(B, 2N-1, R, S)`` polar images -> ``(B, N, 2)`` in ray-sample units."""
        x = np.asarray(polar, dtype=self.network.dtype)[..., None]
        return self.network.forward(x)[:, :, 0, 0, :]

    def cast(self, source, center, slice_index=None) -> np.ndarray:
        img = cast_polar_stack(source, center, self.grid, self.config.stack, slice_index)
        return img.data

    def save(self, directory) -> Path:
        return save_network(self.network, directory, {"model_config": self.config.to_json()})

    @classmethod
    def load(cls, directory) -> "PolarSegmenter":
        net, manifest = load_network(directory)
        return cls(net, ModelConfig.from_json(manifest["model_config"]))


def outputs_to_contour(out: np.ndarray, grid: PolarGrid, center, slice_index=None) -> ContourPair:
    out = np.asarray(out, dtype=np.float64)
    # float32 softplus can underflow to exactly 0
    lumen = np.maximum(out[:, 0], MIN_LUMEN_SAMPLES)
    return ContourPair(lumen * grid.ray_spacing, out[:, 1] * grid.ray_spacing, center,
                       grid.angles, slice_index)


def predict(model: PolarSegmenter, vol, center, slice_index=None) -> ContourPair:
    """Contours around ``center`` on one axial slice, radii in mm."""
    x = model.cast(vol, center, slice_index)[None]
    return outputs_to_contour(model.forward(x)[0], model.grid, center, slice_index)


def predict_many(model: PolarSegmenter, vol, centers, slice_indices=None, chunk: int = 32) -> list[ContourPair]:
    centers = [tuple(c) for c in centers]
    if slice_indices is None:
        slice_indices = [None] * len(centers)
    out = []
    for i in range(0, len(centers), chunk):
        cs = centers[i:i + chunk]
        x = np.stack([model.cast(vol, c) for c in cs])
        y = model.forward(x)
        out.extend(outputs_to_contour(y[b], model.grid, c, s)
                   for b, (c, s) in enumerate(zip(cs, slice_indices[i:i + chunk])))
    return out


def ensemble_predict(models, vol, center, slice_index=None) -> ContourPair:
    """Per-angle mean of lumen radii and thicknesses over ``models``."""
    models = list(models)
    if not models:
        raise ValueError("ensemble needs at least one model")
    grid = models[0].grid
    for m in models[1:]:
        if m.grid != grid:
            raise ValueError(f"mismatched polar grids in ensemble: {m.grid} vs {grid}")
    preds = [predict(m, vol, center, slice_index) for m in models]
    lumen = np.mean([p.lumen_radii for p in preds], axis=0)
    thick = np.mean([p.thickness for p in preds], axis=0)
    return ContourPair(lumen, thick, preds[0].center, grid.angles, slice_index)


@dataclass
class TrainingSlice:
    """One annotated axial slice: normalized volume plus truth contours around the true centre."""

    volume: Volume
    truth: ContourPair
    slice_index: int

    def inscribed_radius(self) -> float:
        n = self.truth.n_angles
        return float(self.truth.lumen_radii.min() * math.cos(math.pi / n))


def training_slices(phantoms) -> list[TrainingSlice]:
    """Every (vessel, slice) pair of ``[(normalized volume, PhantomTruth), ...]``."""
    out = []
    for vol, truth in phantoms:
        for v in truth.vessels:
            for k in v.slices:
                out.append(TrainingSlice(vol, v.contour(int(k), truth.angles), int(k)))
    return out


def make_example(model_cfg: ModelConfig, sample: TrainingSlice, center) -> tuple[np.ndarray, np.ndarray]:
    """Polar input and ``(N, 2)`` target (lumen, thickness) in ray-sample units."""
    grid = model_cfg.grid
    x = cast_polar_stack(sample.volume, center, grid, model_cfg.stack).data
    lumen, outer = radii_from_truth(sample.truth, center, grid)
    y = np.stack([lumen, outer - lumen], axis=1) / grid.ray_spacing
    return x, y.astype(np.float32)


def _jitter_radius(cfg: ModelConfig, sample: TrainingSlice) -> float:
    limit = 0.9 * sample.inscribed_radius()
    r = cfg.jitter_mm if cfg.jitter_mm is not None else cfg.jitter_fraction * sample.truth.lumen_radii.min()
    return min(r, limit)


@dataclass
class TrainRecord:
    epochs: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def train(model: PolarSegmenter, samples: list[TrainingSlice], cfg: ModelConfig | None = None,
          validation: list[TrainingSlice] | None = None, val_every: int = 0,
          steps: int | None = None, progress=None) -> tuple[PolarSegmenter, TrainRecord]:
    """Adam on the smooth-L1 loss of (lumen radius, thickness) per angle.

    With ``cfg.augment`` every epoch re-casts each slice around a freshly
    jittered centre and recomputes its targets from that centre.  ``steps``
    caps the total number of optimizer updates (used for overfit checks).
    """
    cfg = cfg or model.config
    if not samples:
        raise ValueError("training set is empty")
    order_seq, jitter_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    order_rng = np.random.default_rng(order_seq)
    jitter_rng = np.random.default_rng(jitter_seq)
    net = model.network
    params = net.params()
    state = AdamState.zeros_like(params)
    dtype = net.dtype

    cached = None
    if not cfg.augment:
        pairs = [make_example(cfg, s, s.truth.center) for s in samples]
        cached = (np.stack([p[0] for p in pairs]).astype(dtype), np.stack([p[1] for p in pairs]).astype(dtype))

    record = TrainRecord()
    n = len(samples)
    total_steps = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        if cfg.augment:
            xs, ys = [], []
            for i in range(n):
                s = samples[i]
                c = jitter_center(s.truth.center, _jitter_radius(cfg, s), jitter_rng)
                x, y = make_example(cfg, s, c)
                xs.append(x)
                ys.append(y)
            X, Y = np.stack(xs).astype(dtype), np.stack(ys).astype(dtype)
        else:
            X, Y = cached
        losses = []
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            loss, grads = _batch_gradients(net, X, Y, idx, cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size + 1}")
            adam_step(params, grads, state, lr=cfg.lr)
            losses.append(loss * len(idx))
            total_steps += 1
            if steps is not None and total_steps >= steps:
                break
        entry = {"epoch": epoch, "loss": float(sum(losses)) / _seen(n, cfg.batch_size, len(losses))}
        if validation and val_every and epoch % val_every == 0:
            entry.update(validate(model, validation))
        entry["seconds"] = time.perf_counter() - t0
        record.epochs.append(entry)
        if progress is not None:
            progress(entry)
        log.debug("epoch %d loss %.5f", epoch, entry["loss"])
        if steps is not None and total_steps >= steps:
            break
    return model, record


def _seen(n, batch, n_batches):
    return sum(min(batch, n - b * batch) for b in range(n_batches))


def _batch_gradients(net: Network, X, Y, idx, cfg: ModelConfig):
    total = len(idx)
    grads = None
    loss_sum = 0.0
    for c0 in range(0, total, cfg.micro_batch):
        sub = idx[c0:c0 + cfg.micro_batch]
        x = X[sub][..., None]
        out, caches = net.forward_train(x)
        pred = out[:, :, 0, 0, :]
        loss, g = smooth_l1(pred, Y[sub], cfg.beta)
        scale = len(sub) / total
        loss_sum += loss * scale
        g_out = (g * scale)[:, :, None, None, :]
        gs, _ = net.backward(g_out, caches)
        grads = gs if grads is None else [a + b for a, b in zip(grads, gs)]
    return loss_sum, grads


def validate(model: PolarSegmenter, samples: list[TrainingSlice], supersample: int = 4) -> dict:
    """Median wall DSC and contour HDs at the true centres."""
    from .metrics import evaluate_pairs

    preds, truths, grids = [], [], []
    for s in samples:
        preds.append(predict(model, s.volume, s.truth.center, s.slice_index))
        truths.append(s.truth)
        grids.append(SliceGrid.from_volume(s.volume))
    results = evaluate_pairs(preds, truths, grids, supersample=supersample)
    return {
        "val_dsc_wall": float(np.median([r.dsc_wall for r in results])),
        "val_hd_lumen_mm": float(np.median([r.hd_lumen_mm for r in results])),
        "val_hd_outer_mm": float(np.median([r.hd_outer_mm for r in results])),
    }


def shift_rows(polar: np.ndarray, shift: int, n_angles: int) -> np.ndarray:
    """Cyclically shift the canonical rays of a padded polar image and re-pad."""
    lead = n_angles // 2
    canonical = polar[lead:lead + n_angles]
    return pad_periodic(np.roll(canonical, shift, axis=0))
