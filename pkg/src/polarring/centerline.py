"""Centreline localization: proximity fields and shortest-path tracing."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import EXTERNAL, INTERNAL, PhantomTruth
from .volume import Volume

CHANNELS = (INTERNAL, EXTERNAL)
DEFAULT_A = 6.0
DEFAULT_D_M = 5.0


def proximity_value(distance, a: float = DEFAULT_A, d_max: float = DEFAULT_D_M):
    """``exp(a (1 - d / d_max)) - 1`` inside the support ``d < d_max``, else 0."""
    d = np.asarray(distance, dtype=np.float64)
    inside = d < d_max
    val = np.where(inside, np.expm1(a * (1.0 - np.where(inside, d, 0.0) / d_max)), 0.0)
    return float(val) if val.ndim == 0 else val


def distance_to_polyline(points, polyline) -> np.ndarray:
    """Euclidean distance from each point ``(M, 3)`` to a polyline ``(K, 3)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    line = np.asarray(polyline, dtype=np.float64).reshape(-1, 3)
    if len(line) == 1:
        return np.linalg.norm(pts - line[0], axis=1)
    best = np.full(len(pts), np.inf)
    for p0, p1 in zip(line[:-1], line[1:]):
        seg = p1 - p0
        ll = float(seg @ seg)
        t = np.zeros(len(pts)) if ll == 0 else np.clip((pts - p0) @ seg / ll, 0.0, 1.0)
        d = np.linalg.norm(pts - (p0 + t[:, None] * seg), axis=1)
        np.minimum(best, d, out=best)
    return best


@dataclass
class ProximityMap:
    """Two non-negative channels (internal, external) on a volume grid."""

    channels: dict[str, Volume]
    a: float = DEFAULT_A
    d_max: float = DEFAULT_D_M
    centerlines: dict[str, list[np.ndarray]] = field(default_factory=dict, repr=False)

    def __getitem__(self, name) -> Volume:
        return self.channels[name]


def _field_from_centerlines(grid: Volume, lines, a, d_max) -> np.ndarray:
    out = np.zeros(grid.dims, dtype=np.float64)
    if not lines:
        return out
    m, n, p = grid.dims
    idx = np.stack(np.meshgrid(np.arange(m), np.arange(n), indexing="ij"), axis=-1).reshape(-1, 2)
    sz = grid.spacing[2]
    for k in range(p):
        z = grid.origin[2] + k * sz
        pts = np.empty((len(idx), 3))
        pts[:, :2] = np.asarray(grid.origin[:2]) + idx * np.asarray(grid.spacing[:2])
        pts[:, 2] = z
        best = np.full(len(pts), np.inf)
        for line in lines:
            # only segments within reach of this slice can be closer than d_max
            near = np.abs(line[:, 2] - z) <= d_max + sz
            if not near.any():
                continue
            lo = max(int(np.flatnonzero(near)[0]) - 1, 0)
            hi = min(int(np.flatnonzero(near)[-1]) + 2, len(line))
            np.minimum(best, distance_to_polyline(pts, line[lo:hi]), out=best)
        out[:, :, k] = proximity_value(best, a, d_max).reshape(m, n)
    return out


def proximity_map(truth: PhantomTruth, grid: Volume, a: float = DEFAULT_A,
                  d_max: float = DEFAULT_D_M) -> ProximityMap:
    """Centreline proximity field of every vessel class on the grid of ``grid``."""
    if a <= 0 or d_max <= 0:
        raise ValueError("a and d_max must be positive")
    lines = {c: [v.centerline for v in truth.vessels if v.label == c] for c in CHANNELS}
    return _build(grid, lines, a, d_max)


def _build(grid, lines, a, d_max):
    channels = {c: grid.with_data(_field_from_centerlines(grid, lines[c], a, d_max)) for c in CHANNELS}
    return ProximityMap(channels, a, d_max, {c: [np.array(l) for l in lines[c]] for c in CHANNELS})


@dataclass
class MapNoise:
    sigma_add: float = 0.0
    dropout_prob: float = 0.0
    dropout_radius_mm: float = 2.0
    centerline_wobble_mm: float = 0.0

    def validate(self):
        if min(self.sigma_add, self.dropout_prob, self.dropout_radius_mm, self.centerline_wobble_mm) < 0:
            raise ValueError("noise parameters must be >= 0")


def _wobble(line, amplitude, rng):
    """Smooth in-plane displacement with norm at most ``amplitude`` at every vertex."""
    z = line[:, 2]
    span = max(float(z.max() - z.min()), 1e-6)
    t = (z - z.min()) / span
    disp = np.zeros((len(line), 2))
    for harmonic in (1, 2, 3):
        coef = rng.normal(size=2) / harmonic
        phase = rng.uniform(0, 2 * np.pi, size=2)
        disp += coef * np.sin(np.pi * harmonic * t[:, None] + phase)
    norm = np.linalg.norm(disp, axis=1).max()
    if norm > 0:
        disp *= amplitude / norm
    out = line.copy()
    out[:, :2] += disp
    return out


def degrade_map(pmap: ProximityMap, noise: MapNoise, seed: int = 0) -> ProximityMap:
    """Emulate an imperfect learned proximity predictor.

    In order: rebuild from wobbled centrelines, add clipped Gaussian noise,
    zero balls around randomly chosen slice peaks.
    """
    noise.validate()
    if not (noise.sigma_add or noise.dropout_prob or noise.centerline_wobble_mm):
        return pmap
    rng = np.random.default_rng(seed)
    lines = pmap.centerlines
    channels = dict(pmap.channels)
    if noise.centerline_wobble_mm > 0:
        if not lines:
            raise ValueError("centreline wobble needs a map built from centrelines")
        lines = {c: [_wobble(l, noise.centerline_wobble_mm, rng) for l in ls] for c, ls in lines.items()}
        grid = next(iter(channels.values()))
        channels = _build(grid, lines, pmap.a, pmap.d_max).channels
    out = {}
    for name in CHANNELS:
        vol = channels[name]
        data = np.array(vol.data, dtype=np.float64)
        if noise.sigma_add > 0:
            data = np.maximum(data + rng.normal(0.0, noise.sigma_add, size=data.shape), 0.0)
        if noise.dropout_prob > 0:
            data = _dropout(vol, data, noise, rng)
        out[name] = vol.with_data(data)
    return ProximityMap(out, pmap.a, pmap.d_max, lines)


def _dropout(vol, data, noise, rng):
    m, n, p = data.shape
    idx = np.stack(np.meshgrid(np.arange(m), np.arange(n), np.arange(p), indexing="ij"), axis=-1)
    world = np.asarray(vol.origin) + idx * np.asarray(vol.spacing)
    hit = rng.random(p) < noise.dropout_prob
    for k in np.flatnonzero(hit):
        plane = data[:, :, k]
        if plane.max() <= 0:
            continue
        i, j = np.unravel_index(int(np.argmax(plane)), plane.shape)
        c = world[i, j, k]
        data[np.linalg.norm(world - c, axis=-1) < noise.dropout_radius_mm] = 0.0
    return data


@dataclass
class CenterlinePath:
    voxels: np.ndarray
    world: np.ndarray
    cost: float = 0.0
    channel: str = INTERNAL

    def to_json(self) -> dict:
        return {"channel": self.channel, "voxels": self.voxels.tolist(), "world_mm": self.world.tolist()}

    @classmethod
    def from_json(cls, obj) -> "CenterlinePath":
        return cls(np.asarray(obj["voxels"], dtype=int).reshape(-1, 3),
                   np.asarray(obj["world_mm"], dtype=np.float64).reshape(-1, 3),
                   0.0, obj.get("channel", INTERNAL))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path) -> "CenterlinePath":
        return cls.from_json(json.loads(Path(path).read_text()))

    def centers_by_slice(self) -> dict[int, np.ndarray]:
        """Mean world position of the path voxels on each axial slice."""
        out = {}
        for k in np.unique(self.voxels[:, 2]):
            out[int(k)] = self.world[self.voxels[:, 2] == k].mean(axis=0)
        return out


def _neighbor_offsets():
    offs = [(di, dj, dk) for di in (-1, 0, 1) for dj in (-1, 0, 1) for dk in (-1, 0, 1)
            if (di, dj, dk) != (0, 0, 0)]
    return offs


def node_costs(field_data: np.ndarray) -> np.ndarray:
    """Dijkstra node costs ``max(f) - f``: minimal on the centreline."""
    f = np.asarray(field_data, dtype=np.float64)
    return f.max() - f


def path_cost(costs, spacing, voxels) -> float:
    """Sum over steps of ``(c(u) + c(v)) / 2 * |u - v|_mm``."""
    voxels = np.asarray(voxels)
    if len(voxels) < 2:
        return 0.0
    c = costs[tuple(voxels.T)]
    steps = np.linalg.norm(np.diff(voxels, axis=0) * np.asarray(spacing), axis=1)
    total = 0.0
    for i, step in enumerate(steps):
        total += (c[i] + c[i + 1]) / 2.0 * step
    return float(total)


def shortest_path(costs: np.ndarray, spacing, start, end) -> tuple[list[tuple[int, int, int]], float]:
    """Dijkstra over the 26-connected grid with node costs ``costs``.

    Equal tentative distances keep the lexicographically smaller predecessor.
    """
    dims = costs.shape
    m, n, p = dims
    start = tuple(int(v) for v in start)
    end = tuple(int(v) for v in end)
    for v in (start, end):
        if not all(0 <= v[a] < dims[a] for a in range(3)):
            raise ValueError(f"voxel {v} outside grid {dims}")
    if start == end:
        return [start], 0.0

    flat_cost = costs.ravel().tolist()
    sx, sy, sz = (float(s) for s in spacing)
    offsets = []
    for di, dj, dk in _neighbor_offsets():
        offsets.append((di, dj, dk, (di * n + dj) * p + dk, math.sqrt((di * sx) ** 2 + (dj * sy) ** 2 + (dk * sz) ** 2)))

    def flat(v):
        return (v[0] * n + v[1]) * p + v[2]

    src, dst = flat(start), flat(end)
    size = m * n * p
    dist = [math.inf] * size
    pred = [-1] * size
    done = bytearray(size)
    dist[src] = 0.0
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = 1
        if u == dst:
            break
        i, rem = divmod(u, n * p)
        j, k = divmod(rem, p)
        cu = flat_cost[u]
        for di, dj, dk, dflat, step in offsets:
            ii, jj, kk = i + di, j + dj, k + dk
            if ii < 0 or ii >= m or jj < 0 or jj >= n or kk < 0 or kk >= p:
                continue
            w = u + dflat
            if done[w]:
                continue
            nd = d + (cu + flat_cost[w]) * 0.5 * step
            if nd < dist[w] or (nd == dist[w] and u < pred[w]):
                dist[w] = nd
                pred[w] = u
                heapq.heappush(heap, (nd, w))
    path = []
    u = dst
    while u != -1:
        i, rem = divmod(u, n * p)
        j, k = divmod(rem, p)
        path.append((i, j, k))
        if u == src:
            break
        u = pred[u]
    path.reverse()
    return path, dist[dst]


def trace_centerline(channel: Volume, start, end, channel_name: str = INTERNAL) -> CenterlinePath:
    """Minimum-cost path between two voxels on ``max(f) - f``."""
    costs = node_costs(channel.data)
    path, cost = shortest_path(costs, channel.spacing, start, end)
    vox = np.asarray(path, dtype=int).reshape(-1, 3)
    return CenterlinePath(vox, channel.index_to_world(vox), float(cost), channel_name)


def extract_waypoints(channel: Volume, stride: int = 50) -> list[tuple[int, int, int]]:
    """Per-slice argmax on every ``stride``-th slice, plus the last non-zero slice.

    Slices are counted from the first slice with a non-zero value; all-zero
    slices contribute nothing.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    data = np.asarray(channel.data)
    peaks = data.reshape(-1, data.shape[2]).max(axis=0)
    nonzero = np.flatnonzero(peaks > 0)
    if nonzero.size == 0:
        return []
    first, last = int(nonzero[0]), int(nonzero[-1])
    ks = list(range(first, last + 1, stride))
    if ks[-1] != last:
        ks.append(last)
    out = []
    for k in ks:
        plane = data[:, :, k]
        if plane.max() <= 0:
            continue
        i, j = np.unravel_index(int(np.argmax(plane)), plane.shape)
        out.append((int(i), int(j), int(k)))
    return out


def trace_with_waypoints(channel: Volume, stride: int = 50, channel_name: str = INTERNAL) -> CenterlinePath:
    """Connect consecutive waypoints with shortest paths and concatenate them."""
    waypoints = extract_waypoints(channel, stride)
    if not waypoints:
        raise ValueError(f"proximity channel {channel_name!r} is zero everywhere")
    costs = node_costs(channel.data)
    full = [waypoints[0]]
    total = 0.0
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        seg, cost = shortest_path(costs, channel.spacing, a, b)
        full.extend(seg[1:])
        total += cost
    vox = np.asarray(full, dtype=int).reshape(-1, 3)
    return CenterlinePath(vox, channel.index_to_world(vox), float(total), channel_name)


def flip_path(path: CenterlinePath, channel: Volume) -> CenterlinePath:
    """Mirror a traced path along x to match :func:`volume.flip_sagittal`."""
    vox = path.voxels.copy()
    vox[:, 0] = channel.dims[0] - 1 - vox[:, 0]
    return CenterlinePath(vox, channel.index_to_world(vox), path.cost, path.channel)
