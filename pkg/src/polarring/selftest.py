"""Quick oracle checks run by ``polarring selftest``."""
from __future__ import annotations

import math
import time

import numpy as np

from .centerline import _neighbor_offsets, node_costs, proximity_value, shortest_path
from .contour import count_crossings, to_polygons
from .metrics import dice, hausdorff
from .neuralnet import grad_check
from .polar import pad_periodic
from .segmenter import ModelConfig, build_model, outputs_to_contour, shift_rows


def bellman_ford(costs: np.ndarray, spacing, start) -> np.ndarray:
    """Plain edge relaxation until nothing changes; independent of the heap search."""
    dims = costs.shape
    dist = np.full(dims, np.inf)
    dist[tuple(start)] = 0.0
    sp = np.asarray(spacing, dtype=np.float64)
    edges = []
    for idx in np.ndindex(*dims):
        for off in _neighbor_offsets():
            j = tuple(np.add(idx, off))
            if all(0 <= j[a] < dims[a] for a in range(3)):
                w = (costs[idx] + costs[j]) / 2.0 * float(np.linalg.norm(np.asarray(off) * sp))
                edges.append((idx, j, w))
    changed = True
    while changed:
        changed = False
        for u, v, w in edges:
            if dist[u] + w < dist[v] - 1e-15:
                dist[v] = dist[u] + w
                changed = True
    return dist


def check_proximity(rng) -> bool:
    import mpmath

    for _ in range(200):
        d_max = rng.uniform(0.5, 10.0)
        a = rng.uniform(0.5, 10.0)
        d = rng.uniform(0, 1.5 * d_max)
        got = proximity_value(d, a, d_max)
        want = float(mpmath.e ** (mpmath.mpf(a) * (1 - mpmath.mpf(d) / mpmath.mpf(d_max))) - 1) if d < d_max else 0.0
        if want == 0.0:
            if got != 0.0:
                return False
        elif abs(got - want) > 1e-12 * abs(want):
            return False
    return True


def check_dijkstra(rng) -> bool:
    for _ in range(5):
        f = rng.random((4, 4, 4))
        costs = node_costs(f)
        start = tuple(rng.integers(0, 4, 3))
        end = tuple(rng.integers(0, 4, 3))
        _, cost = shortest_path(costs, (1.0, 1.0, 1.0), start, end)
        ref = bellman_ford(costs, (1.0, 1.0, 1.0), start)[end]
        if abs(cost - ref) > 1e-9 * max(1.0, ref):
            return False
    return True


def _tiny_config(mode="multi") -> ModelConfig:
    return ModelConfig(mode=mode, n_angles=7, n_samples=7, ray_spacing=0.5, stack_k=1, channels=3)


def check_gradients(rng) -> bool:
    model = build_model(_tiny_config(), seed=1)
    cfg = model.config
    x = rng.random((2, 2 * cfg.n_angles - 1, cfg.n_samples, cfg.slices, 1))
    target = rng.random((2, cfg.n_angles, 1, 1, 2)) * 3
    return grad_check(model.network, x, target) <= 1e-3


def check_equivariance(rng) -> bool:
    model = build_model(_tiny_config("single"), seed=2)
    cfg = model.config
    x = pad_periodic(rng.random((cfg.n_angles, cfg.n_samples, 1)))
    base = model.forward(x[None])[0]
    for shift in range(1, cfg.n_angles):
        shifted = model.forward(shift_rows(x, shift, cfg.n_angles)[None])[0]
        if np.max(np.abs(shifted - np.roll(base, shift, axis=0))) > 1e-6:
            return False
    return True


def check_topology(rng) -> bool:
    for seed in range(20):
        model = build_model(_tiny_config("single"), seed=seed)
        cfg = model.config
        out = model.forward(rng.random((10, 2 * cfg.n_angles - 1, cfg.n_samples, 1)) * 4 - 2)
        for o in out:
            cp = outputs_to_contour(o, cfg.grid, (0.0, 0.0, 0.0))
            if np.any(cp.outer_radii < cp.lumen_radii) or count_crossings(*to_polygons(cp)):
                return False
    return True


def check_metrics(rng) -> bool:
    a = np.zeros((4, 4), bool)
    a[0:2, 0:2] = True
    b = np.zeros((4, 4), bool)
    b[0:2, 1:3] = True
    ang = 2 * np.pi * np.arange(720) / 720
    c1 = np.stack([np.cos(ang), np.sin(ang)], 1)
    return (math.isclose(dice(a, b), 0.5, abs_tol=1e-9)
            and abs(hausdorff(c1, 2 * c1) - 1.0) <= 0.02)


CHECKS = [
    ("proximity formula vs mpmath", check_proximity),
    ("dijkstra vs bellman-ford", check_dijkstra),
    ("backprop vs finite differences", check_gradients),
    ("polar shift equivariance", check_equivariance),
    ("nested contour topology", check_topology),
    ("dice / hausdorff hand cases", check_metrics),
]


def run_all(emit=print) -> bool:
    rng = np.random.default_rng(0)
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        passed = bool(fn(rng))
        ok &= passed
        emit(f"{'PASS' if passed else 'FAIL'}  {name}  ({time.perf_counter() - t0:.1f}s)")
    return ok
