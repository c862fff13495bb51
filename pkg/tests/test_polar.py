import math

import numpy as np
import pytest
from scipy.optimize import brentq

from polarring.contour import ContourPair
from polarring.polar import (
    PolarGrid,
    cast_polar,
    cast_polar_stack,
    jitter_center,
    pad_periodic,
    radii_from_truth,
)
from polarring.volume import Volume


def radial_field(center, profile):
    def f(pts):
        d = np.hypot(pts[..., 0] - center[0], pts[..., 1] - center[1])
        return profile(d)
    return f


def test_radially_symmetric_rows_identical():
    c = (1.0, 2.0, 0.0)
    grid = PolarGrid(31, 20, 0.3)
    img = cast_polar(radial_field(c, lambda d: np.exp(-d)), c, grid)
    can = img.canonical
    assert img.data.shape == (61, 20)
    assert np.max(np.abs(can - can[0])) <= 1e-6


def test_radially_symmetric_volume_rows_close():
    xs = np.arange(60) * 0.25
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    c = (7.375, 7.375, 0.5)
    # smooth profile: trilinear error per axis is at most h^2 / 8 * |f''| with |f''| <= 1/4
    data = np.exp(-np.hypot(gx - c[0], gy - c[1]) ** 2 / 8)[:, :, None].repeat(3, axis=2)
    img = cast_polar(Volume(data, (0.25, 0.25, 0.25)), c, PolarGrid(31, 20, 0.3))
    bound = 2 * 2 * 0.25 ** 2 / 8 * 0.25
    assert np.max(np.abs(img.canonical - img.canonical[0])) <= bound


def test_padding_layout():
    n = 31
    can = np.arange(n, dtype=float)[:, None]
    padded = pad_periodic(can)
    assert padded.shape[0] == 2 * n - 1
    assert padded[0, 0] == can[n - n // 2, 0]
    np.testing.assert_array_equal(padded[n // 2:n // 2 + n], can)
    np.testing.assert_array_equal(padded[n // 2 + n:], can[:n - 1 - n // 2])
    # re-padding the canonical block reproduces the image
    np.testing.assert_array_equal(pad_periodic(padded[n // 2:n // 2 + n]), padded)


def test_step_edge_crossing_callable():
    c = (0.0, 0.0, 0.0)
    grid = PolarGrid(31, 20, 0.35)
    img = cast_polar(radial_field(c, lambda d: np.where(d < 3.0, 0.1, 0.9)), c, grid)
    j = math.floor(3.0 / 0.35)
    for row in img.canonical:
        assert row[j] < 0.5 < row[j + 1]


def test_step_edge_crossing_volume():
    s = 0.1
    xs = np.arange(100) * s
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    c = (4.95, 4.95, 0.1)
    data = np.where(np.hypot(gx - c[0], gy - c[1]) < 3.0, 0.1, 0.9)[:, :, None].repeat(3, axis=2)
    img = cast_polar(Volume(data, (s, s, s)), c, PolarGrid(31, 20, 0.35))
    j = math.floor(3.0 / 0.35)
    for row in img.canonical:
        assert row[j] < 0.5 < row[j + 1]


def test_stack_k0_equals_single_plane(rng):
    vol = Volume(rng.random((20, 20, 6)))
    c = (9.3, 10.1, 2.0)
    grid = PolarGrid(15, 8, 0.5)
    a = cast_polar(vol, c, grid).data
    b = cast_polar_stack(vol, c, grid, 0).data
    np.testing.assert_array_equal(b[:, :, 0], a)


def test_stack_invariant_tube_and_out_of_bounds():
    xs = np.arange(30) * 0.5
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    plane = (np.hypot(gx - 7.0, gy - 7.0) < 3).astype(float) + 0.5
    vol = Volume(plane[:, :, None].repeat(10, axis=2), (0.5, 0.5, 0.5))
    grid = PolarGrid(15, 10, 0.5)
    stack = cast_polar_stack(vol, (7.0, 7.0, 2.5), grid, 3).data
    for p in range(7):
        np.testing.assert_allclose(stack[:, :, p], stack[:, :, 3], atol=1e-6)
    top = cast_polar_stack(vol, (7.0, 7.0, 4.5), grid, 3).data
    assert np.all(top[:, :, 4:] == 0)
    assert np.all(top[:, 0, 3] > 0)


def test_center_outside_volume_rejected():
    vol = Volume(np.ones((5, 5, 5)))
    with pytest.raises(ValueError, match="outside"):
        cast_polar(vol, (10.0, 0.0, 0.0), PolarGrid(7, 4, 1.0))


def test_jitter_statistics():
    c = (1.0, -2.0, 3.0)
    assert jitter_center(c, 0.0, 5) == c
    rng = np.random.default_rng(0)
    pts = np.array([jitter_center(c, 1.0, rng) for _ in range(10000)])
    off = pts[:, :2] - np.asarray(c[:2])
    assert np.all(np.hypot(off[:, 0], off[:, 1]) <= 1.0 + 1e-12)
    assert np.all(pts[:, 2] == c[2])
    # uniform disk: each coordinate has variance R^2 / 4
    se = 3 * 0.5 / math.sqrt(len(pts))
    assert np.all(np.abs(off.mean(axis=0)) < se)
    assert jitter_center(c, 1.0, 7) == jitter_center(c, 1.0, 7)


def circle_contour(r, vertices=3600):
    return ContourPair(np.full(vertices, r), np.full(vertices, 0.5), (0.0, 0.0, 0.0))


def test_radii_from_offset_circle():
    r, d = 3.0, 1.0
    grid = PolarGrid(4, 4, 1.0)   # rays at 0, pi/2, pi, 3pi/2
    lumen, outer = radii_from_truth(circle_contour(r), (d, 0.0, 0.0), grid)

    def along(phi, radius):
        # analytic root of |(d, 0) + t (cos phi, sin phi)| = radius
        return brentq(lambda t: math.hypot(d + t * math.cos(phi), t * math.sin(phi)) - radius, 0, 2 * radius)

    assert lumen[0] == pytest.approx(r - d, abs=1e-9)
    assert lumen[2] == pytest.approx(r + d, abs=1e-9)
    assert along(math.pi / 2, r) == pytest.approx(math.sqrt(r * r - d * d), abs=1e-12)
    # the polygon chord sits inside the circle by at most r (1 - cos(pi / V))
    sag = r * (1 - math.cos(math.pi / 3600))
    assert lumen[1] == pytest.approx(along(math.pi / 2, r), abs=sag + 1e-12)
    assert outer[3] == pytest.approx(along(3 * math.pi / 2, r + 0.5), abs=sag + 1e-12)


def test_radii_from_truth_roundtrip(rng):
    grid = PolarGrid(31, 10, 0.5)
    cp = ContourPair(rng.uniform(1.5, 3.0, 31), rng.uniform(0.2, 1.5, 31), (2.0, -1.0, 4.0))
    lumen, outer = radii_from_truth(cp, cp.center, grid)
    np.testing.assert_allclose(lumen, cp.lumen_radii, atol=1e-9)
    np.testing.assert_allclose(outer, cp.outer_radii, atol=1e-9)


def test_center_outside_lumen_rejected():
    with pytest.raises(ValueError, match="not inside"):
        radii_from_truth(circle_contour(1.0, 64), (2.0, 0.0, 0.0), PolarGrid(8, 4, 1.0))


def test_rotation_shifts_rows():
    n = 31
    grid = PolarGrid(n, 16, 0.3)
    c = (0.5, -0.5, 0.0)

    def field(rot):
        def f(pts):
            x, y = pts[..., 0] - c[0], pts[..., 1] - c[1]
            t = np.arctan2(y, x) - rot
            return np.hypot(x, y) * (1 + 0.3 * np.cos(3 * t) + 0.1 * np.sin(t))
        return f

    base = cast_polar(field(0.0), c, grid).canonical
    rotated = cast_polar(field(2 * np.pi / n), c, grid).canonical
    np.testing.assert_allclose(rotated, np.roll(base, 1, axis=0), atol=1e-5)


def test_polar_image_save(tmp_path):
    img = cast_polar_stack(radial_field((0, 0), lambda d: d), (0.0, 0.0, 0.0), PolarGrid(7, 5, 0.5), 1, 3)
    img.save(tmp_path / "polar")
    from polarring.volume import load_volume, read_volume_header
    back = load_volume(tmp_path / "polar.vol")
    assert back.dims == (13, 5, 3)
    assert read_volume_header(tmp_path / "polar.vol")["slice"] == 3
