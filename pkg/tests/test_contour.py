import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from polarring.contour import (
    ContourPair,
    SliceGrid,
    binary_wall,
    count_crossings,
    load_contours,
    points_in_polygon,
    polygon_area,
    radial_polygon,
    rasterize,
    read_pgm,
    save_contours,
    to_polygons,
    wall_mask,
    write_pgm,
)


def test_constant_radii_give_regular_polygon():
    n, r = 31, 2.5
    cp = ContourPair(np.full(n, r), np.full(n, 1.0), (1.0, 2.0, 0.0))
    lumen, outer = to_polygons(cp)
    assert np.allclose(np.hypot(lumen[:, 0] - 1, lumen[:, 1] - 2), r)
    edges = np.linalg.norm(np.roll(lumen, -1, axis=0) - lumen, axis=1)
    assert np.allclose(edges, 2 * r * math.sin(math.pi / n))
    assert polygon_area(lumen) == pytest.approx(0.5 * n * r * r * math.sin(2 * math.pi / n))


def test_zero_thickness_polygons_identical(rng):
    cp = ContourPair(rng.uniform(1, 2, 16), np.zeros(16), (0.0, 0.0, 0.0))
    lumen, outer = to_polygons(cp)
    np.testing.assert_array_equal(lumen, outer)
    assert count_crossings(lumen, outer) == 0


def test_random_pairs_never_cross(rng):
    for _ in range(1000):
        n = int(rng.integers(4, 40))
        cp = ContourPair(rng.uniform(0.05, 5, n), rng.uniform(0, 3, n) * (rng.random(n) < 0.8),
                         tuple(rng.normal(size=3)))
        lumen, outer = to_polygons(cp)
        assert count_crossings(lumen, outer) == 0
        # independent geometry engine: the lumen region lies within the outer region
        assert Polygon(outer).buffer(1e-9).covers(Polygon(lumen))


def test_crossing_counter_detects_crossings():
    square = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    shifted = square + 1.0
    assert count_crossings(square, shifted) == 2
    assert count_crossings(square, square * 0.5 + 0.5) == 0


def test_invalid_contours():
    with pytest.raises(ValueError):
        ContourPair(np.array([1.0, 0.0, 1.0, 1.0]), np.zeros(4), (0, 0, 0))
    with pytest.raises(ValueError):
        ContourPair(np.ones(4), np.array([0.1, -0.1, 0, 0]), (0, 0, 0))
    with pytest.raises(ValueError):
        ContourPair(np.ones(4), np.zeros(3), (0, 0, 0))


def test_rasterize_pixel_aligned_square():
    grid = SliceGrid((6, 6))
    square = np.array([[1.5, 1.5], [3.5, 1.5], [3.5, 3.5], [1.5, 3.5]])
    mask = rasterize(square, grid, 4)
    want = np.zeros((6, 6))
    want[2:4, 2:4] = 1.0
    np.testing.assert_array_equal(mask, want)


def test_rasterize_circle_area():
    sx = 0.5
    r = 4 * sx
    grid = SliceGrid((40, 40), (sx, sx))
    poly = radial_polygon((10.0, 10.0), np.full(2000, r), 2 * np.pi * np.arange(2000) / 2000)
    area = rasterize(poly, grid, 8).sum() * sx * sx
    assert area == pytest.approx(math.pi * r * r, rel=0.01)


def test_rasterize_translation_by_one_pixel(rng):
    grid = SliceGrid((30, 30), (0.5, 0.5))
    cp = ContourPair(rng.uniform(1.5, 3, 31), np.zeros(31), (6.3, 7.1, 0.0))
    poly = to_polygons(cp)[0]
    a = rasterize(poly, grid, 4)
    b = rasterize(poly + [0.5, 0.0], grid, 4)
    np.testing.assert_array_equal(b[1:], a[:-1])


def test_wall_mask_properties():
    grid = SliceGrid((60, 60), (0.25, 0.25), (-7.5, -7.5))
    n = 720
    cp = ContourPair(np.full(n, 3.0), np.full(n, 1.5), (0.0, 0.0, 0.0))
    wall = wall_mask(cp, grid, 4)
    assert wall.min() >= 0
    assert wall.sum() * 0.0625 == pytest.approx(math.pi * (4.5 ** 2 - 3.0 ** 2), rel=0.02)
    xs, ys = grid.pixel_centers()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    assert np.all(wall[np.hypot(gx, gy) < 2.5] == 0)
    zero = ContourPair(np.full(n, 3.0), np.zeros(n), (0.0, 0.0, 0.0))
    assert wall_mask(zero, grid).sum() == 0
    assert binary_wall(zero, grid).sum() == 0


def test_rasterized_area_converges_to_shoelace():
    grid = SliceGrid((40, 40), (0.5, 0.5))
    ang = 2 * np.pi * np.arange(31) / 31
    poly = radial_polygon((9.8, 10.3), 4 + 1.2 * np.sin(3 * ang) + 0.5 * np.cos(ang), ang)
    exact = polygon_area(poly)
    errors = [abs(rasterize(poly, grid, s).sum() * 0.25 - exact) for s in (2, 4, 8)]
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] / exact < 0.01


def test_points_in_polygon_matches_shapely(rng):
    ang = 2 * np.pi * np.arange(17) / 17
    poly = radial_polygon((0, 0), rng.uniform(1, 3, 17), ang)
    pts = rng.uniform(-3, 3, (500, 2))
    shape = Polygon(poly)
    from shapely.geometry import Point
    want = np.array([shape.contains(Point(p)) for p in pts])
    np.testing.assert_array_equal(points_in_polygon(pts, poly), want)


def test_contours_json_roundtrip(tmp_path, rng):
    cps = [ContourPair(rng.uniform(1, 2, 31), rng.uniform(0, 1, 31), (1.0, 2.0, 3.0), slice_index=k)
           for k in range(3)]
    save_contours(cps, tmp_path / "c.json")
    back = load_contours(tmp_path / "c.json")
    for a, b in zip(cps, back):
        np.testing.assert_array_equal(a.lumen_radii, b.lumen_radii)
        np.testing.assert_array_equal(a.thickness, b.thickness)
        assert a.center == b.center and a.slice_index == b.slice_index


def test_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 5)).astype(np.uint8)
    path = write_pgm(img, tmp_path / "x.pgm")
    assert path.read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(read_pgm(path), img)
