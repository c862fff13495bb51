import math

import numpy as np
import pytest

from conftest import tube_config
from polarring.contour import count_crossings, to_polygons
from polarring.neuralnet import ConvLayer, Network
from polarring.phantom import generate_phantom
from polarring.polar import PolarGrid, cast_polar_stack, pad_periodic, radii_from_truth
from polarring.segmenter import (
    ModelConfig,
    PolarSegmenter,
    TrainingSlice,
    build_model,
    ensemble_predict,
    layer_schedule,
    make_example,
    outputs_to_contour,
    predict,
    predict_many,
    shift_rows,
    train,
    training_slices,
)
from polarring.volume import Volume


def small_cfg(**kw):
    base = dict(mode="single", n_angles=15, n_samples=15, ray_spacing=0.5, stack_k=1, channels=6,
                batch_size=8, micro_batch=4, epochs=3, lr=3e-3)
    base.update(kw)
    return ModelConfig(**base)


def tube(r, t, seed=0, nz=2):
    vol, truth = generate_phantom(tube_config(dims=(41, 41, nz), lumen_radius_mm=(r, r),
                                              thickness_mm=(t, t), seed=seed))
    # noiseless tubes leave both percentiles on the background, so scale directly
    return vol.with_data(vol.data / 255.0), truth


@pytest.fixture(scope="module")
def tube_set():
    return [tube(r, t, i) for i, (r, t) in enumerate(
        [(2.0, 0.9), (2.0, 1.5), (3.0, 0.9), (3.0, 1.5), (2.5, 1.2), (2.25, 1.0),
         (2.75, 1.4), (2.5, 0.9), (2.5, 1.5), (2.0, 1.2), (3.0, 1.2)])]


@pytest.mark.parametrize("mode", ["single", "multi"])
def test_output_shape_full_size(mode, rng):
    cfg = ModelConfig(mode=mode, channels=4)
    model = build_model(cfg)
    x = rng.random((1, 61, 127, cfg.slices)).astype(np.float32)
    assert model.forward(x).shape == (1, 31, 2)


def test_schedule_budget():
    sched = layer_schedule(ModelConfig(mode="multi"))
    ang = [s["dilation"][0] for s in sched if s["kernel"][0] > 1]
    rad = [s["dilation"][1] for s in sched if s["kernel"][1] > 1]
    assert ang == [1, 2, 4, 8]
    assert rad == [1, 2, 4, 8, 16, 32]
    assert sum(2 * d for d in ang) == 30 and sum(2 * d for d in rad) == 126
    assert sum(s["kernel"][2] - 1 for s in sched) == 6


@pytest.mark.parametrize("bad", [dict(n_angles=30), dict(n_angles=29), dict(n_samples=100),
                                 dict(mode="both"), dict(kernel=4)])
def test_invalid_footprints_rejected(bad):
    with pytest.raises(ValueError):
        build_model(ModelConfig(**bad))


def test_same_seed_same_weights():
    a, b = build_model(small_cfg(seed=5)), build_model(small_cfg(seed=5))
    for p, q in zip(a.network.params(), b.network.params()):
        np.testing.assert_array_equal(p, q)
    c = build_model(small_cfg(seed=6))
    assert not np.array_equal(a.network.params()[0], c.network.params()[0])


def test_outputs_nonnegative_and_nested(rng):
    model = build_model(small_cfg())
    cfg = model.config
    x = (rng.random((1000, 29, 15, 1)) * 6 - 3).astype(np.float32)
    out = model.forward(x)
    assert out.min() >= 0
    for o in out[:200]:
        cp = outputs_to_contour(o, cfg.grid, (0.0, 0.0, 0.0))
        assert np.all(cp.outer_radii >= cp.lumen_radii)
        assert count_crossings(*to_polygons(cp)) == 0


def test_underflowing_lumen_is_clamped():
    cp = outputs_to_contour(np.zeros((15, 2)), PolarGrid(15, 15, 0.5), (0.0, 0.0, 0.0))
    assert np.all(cp.lumen_radii > 0)


def test_shift_equivariance(rng):
    model = build_model(small_cfg(seed=3))
    x = pad_periodic(rng.random((15, 15, 1)).astype(np.float32))
    base = model.forward(x[None])[0]
    for shift in (1, 4, 9):
        np.testing.assert_allclose(model.forward(shift_rows(x, shift, 15)[None])[0],
                                   np.roll(base, shift, axis=0), atol=1e-6)


def test_rotation_equivariance_functional_field():
    cfg = small_cfg(n_samples=31, ray_spacing=0.25)
    model = build_model(cfg, seed=2)
    n = cfg.n_angles

    def field(rot):
        def f(pts):
            x, y = pts[..., 0], pts[..., 1]
            t = np.arctan2(y, x) - rot
            r = 2.5 + 0.4 * np.cos(2 * t) + 0.2 * np.sin(t)
            return 1.0 / (1.0 + np.exp(-(np.hypot(x, y) - r) * 4))
        return f

    base = predict(model, field(0.0), (0.0, 0.0, 0.0))
    rot = predict(model, field(2 * np.pi / n), (0.0, 0.0, 0.0))
    np.testing.assert_allclose(rot.lumen_radii, np.roll(base.lumen_radii, 1), atol=1e-3)
    np.testing.assert_allclose(rot.outer_radii, np.roll(base.outer_radii, 1), atol=1e-3)


def test_make_example_targets(tube_set):
    vol, truth = tube_set[4]
    s = training_slices([(vol, truth)])[0]
    cfg = small_cfg()
    x, y = make_example(cfg, s, s.truth.center)
    assert x.shape == (29, 15, 1) and y.shape == (15, 2)
    lumen, outer = radii_from_truth(s.truth, s.truth.center, cfg.grid)
    np.testing.assert_allclose(y[:, 0] * 0.5, lumen, rtol=1e-6)
    np.testing.assert_allclose(y[:, 1] * 0.5, outer - lumen, rtol=1e-5, atol=1e-6)


def test_training_deterministic(tube_set):
    samples = training_slices(tube_set[:4])
    cfg = small_cfg(epochs=2, augment=True)
    a, ra = train(build_model(cfg), samples, cfg)
    b, rb = train(build_model(cfg), samples, cfg)
    assert ra.losses == rb.losses
    for p, q in zip(a.network.params(), b.network.params()):
        np.testing.assert_array_equal(p, q)


def test_zero_jitter_augmentation_equals_plain(tube_set):
    samples = training_slices(tube_set[:4])
    cfg_a = small_cfg(epochs=2, augment=True, jitter_mm=0.0)
    cfg_b = small_cfg(epochs=2, augment=False)
    a, _ = train(build_model(cfg_a), samples, cfg_a)
    b, _ = train(build_model(cfg_b), samples, cfg_b)
    for p, q in zip(a.network.params(), b.network.params()):
        np.testing.assert_array_equal(p, q)


def test_jitter_keeps_centre_inside_lumen(tube_set):
    samples = training_slices(tube_set[:2])
    cfg = small_cfg(epochs=3, augment=True, jitter_mm=10.0)
    _, rec = train(build_model(cfg), samples, cfg)
    assert all(np.isfinite(rec.losses))


def test_loss_decreases(tube_set):
    samples = training_slices(tube_set)
    cfg = small_cfg(epochs=50)
    _, rec = train(build_model(cfg), samples, cfg)
    assert rec.losses[-1] <= rec.losses[0]
    assert rec.losses[-1] < 0.5 * rec.losses[0]


def test_overfits_single_example(tube_set):
    samples = training_slices(tube_set[4:5])[:1]
    cfg = small_cfg(epochs=10000, batch_size=1, micro_batch=1, lr=1e-2)
    _, rec = train(build_model(cfg), samples, cfg, steps=500)
    assert sum(1 for _ in rec.epochs) == 500
    assert rec.losses[-1] < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tube_set):
    vol, truth = tube_set[0]
    bad = vol.with_data(np.full(vol.data.shape, np.nan, dtype=np.float32))
    samples = training_slices([(bad, truth)])
    with pytest.raises(FloatingPointError):
        train(build_model(small_cfg()), samples, small_cfg())


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train(build_model(small_cfg()), [], small_cfg())


@pytest.mark.slow
def test_straight_tube_model_accuracy(tube_set):
    cfg = ModelConfig(mode="single", n_angles=15, n_samples=31, ray_spacing=0.35, channels=8,
                      epochs=800, batch_size=8, micro_batch=8, lr=3e-3)
    model, _ = train(build_model(cfg), training_slices(tube_set), cfg)
    for r, t in [(2.4, 1.1), (2.8, 1.3)]:
        vol, truth = tube(r, t, 99)
        cp = truth.vessels[0].contour(1, truth.angles)
        lumen, outer = radii_from_truth(cp, cp.center, model.grid)
        p = predict(model, vol, cp.center, 1)
        assert np.abs(p.lumen_radii - lumen).max() <= 0.5 * cfg.ray_spacing
        assert np.abs(p.outer_radii - outer).max() <= 0.5 * cfg.ray_spacing


def constant_model(cfg, lumen_samples, thick_samples):
    """Network whose head ignores its input: outputs are fixed softplus(bias)."""
    model = build_model(cfg)
    head = model.network.layers[-1]
    inv = lambda y: y + math.log(-math.expm1(-y))
    head.weight[...] = 0
    head.bias[:] = [inv(lumen_samples), inv(thick_samples)]
    return model


def test_ensemble_means(tube_set):
    vol, truth = tube_set[0]
    c = tuple(truth.vessels[0].centerline[0])
    cfg = small_cfg()
    m1 = constant_model(cfg, 4.0, 2.0)
    m2 = constant_model(cfg, 6.0, 1.0)
    single = ensemble_predict([m1], vol, c, 0)
    direct = predict(m1, vol, c, 0)
    np.testing.assert_array_equal(single.lumen_radii, direct.lumen_radii)
    both = ensemble_predict([m1, m2], vol, c, 0)
    np.testing.assert_allclose(both.lumen_radii, 2.5, rtol=1e-5)
    np.testing.assert_allclose(both.thickness, 0.75, rtol=1e-5)
    other = build_model(small_cfg(ray_spacing=0.4))
    with pytest.raises(ValueError, match="mismatched"):
        ensemble_predict([m1, other], vol, c, 0)


def test_predict_many_matches_predict(tube_set, rng):
    vol, truth = tube_set[3]
    model = build_model(small_cfg(seed=4))
    centers = [tuple(truth.vessels[0].centerline[k]) for k in range(2)]
    many = predict_many(model, vol, centers, [0, 1], chunk=1)
    for cp, c, k in zip(many, centers, [0, 1]):
        one = predict(model, vol, c, k)
        np.testing.assert_allclose(cp.lumen_radii, one.lumen_radii, rtol=1e-6)
        assert cp.slice_index == k


def test_model_save_load(tmp_path, rng):
    model = build_model(small_cfg(mode="multi"))
    model.save(tmp_path / "m")
    back = PolarSegmenter.load(tmp_path / "m")
    assert back.config == model.config
    x = rng.random((2, 29, 15, 3)).astype(np.float32)
    np.testing.assert_array_equal(back.forward(x), model.forward(x))
