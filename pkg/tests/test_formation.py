import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from aquathru.formation import (
    PRESETS,
    RaySamples,
    UnderwaterSynthesizer,
    WaterParams,
    segment_weights,
    synthesize,
)
from aquathru.raster_io import RangeMap, RgbImage

PARAMS = WaterParams(veil=(0.1, 0.3, 0.4), beta_b=(0.9, 0.3, 0.2), beta_d=(0.6, 0.2, 0.1))


def test_zero_range_is_identity():
    clean = np.random.default_rng(0).uniform(0, 1, (5, 7, 3))
    out, report = synthesize(clean, np.zeros((5, 7)), PARAMS)
    np.testing.assert_array_equal(out.data, clean)
    assert report.clamped_pixels == 0


def test_far_range_saturates_to_veil():
    clean = np.random.default_rng(1).uniform(0, 1, (4, 4, 3))
    out, _ = synthesize(clean, np.full((4, 4), 1000.0), PARAMS)
    assert np.max(np.abs(out.data - PARAMS.veil)) <= 1e-6


def test_scalar_example():
    # per-channel evaluation with the math module, independent of the numpy path
    J, z = 0.8, 2.0
    expected = [
        J * math.exp(-bd * z) + B * (1 - math.exp(-bb * z))
        for bd, bb, B in zip((0.6, 0.2, 0.1), (0.9, 0.3, 0.2), (0.1, 0.3, 0.4))
    ]
    out, _ = synthesize(np.full((1, 1, 3), J), np.full((1, 1), z), PARAMS)
    np.testing.assert_allclose(out.data[0, 0], expected, rtol=0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 3),
       st.lists(st.floats(0, 30), min_size=2, max_size=8))
def test_monotone_approach_to_veil(J, veil, beta, zs):
    # with one shared coefficient the gap to the veil is |J - veil| exp(-beta z)
    params = WaterParams((veil,) * 3, (beta,) * 3, (beta,) * 3)
    zs = np.sort(np.array(zs))
    out, _ = synthesize(np.full((1, len(zs), 3), J), zs[None, :], params)
    I = out.data[0, :, 0]
    assert np.all(np.diff(np.abs(I - veil)) <= 1e-12)
    step = np.diff(I)
    assert np.all(step >= -1e-12) if veil >= J else np.all(step <= 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 3), st.floats(0.01, 3), st.floats(0, 30))
def test_gap_to_veil_bounded_by_decay(J, veil, bd, bb, z):
    params = WaterParams((veil,) * 3, (bb,) * 3, (bd,) * 3)
    out, _ = synthesize(np.full((1, 1, 3), J), np.full((1, 1), z), params)
    bound = J * math.exp(-bd * z) + veil * math.exp(-bb * z)
    assert abs(out.data[0, 0, 0] - veil) <= bound + 1e-12


def test_synthesize_is_pure():
    rng = np.random.default_rng(3)
    clean, z = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 5, (8, 8))
    a, _ = synthesize(clean, z, PARAMS)
    b, _ = synthesize(clean, z, PARAMS)
    assert a.data.tobytes() == b.data.tobytes()


def test_invalid_range_pixels_copied_and_reported():
    clean = np.full((2, 2, 3), 0.7)
    z = RangeMap(np.full((2, 2), 3.0), valid=np.array([[True, False], [True, True]]))
    out, report = synthesize(clean, z, PARAMS)
    assert report.invalid_pixels == 1
    assert report.invalid_mask.tolist() == [[False, True], [False, False]]
    np.testing.assert_array_equal(out.data[0, 1], clean[0, 1])
    assert not np.allclose(out.data[0, 0], clean[0, 0])


def test_errors():
    with pytest.raises(ValueError, match="differ"):
        synthesize(np.zeros((2, 2, 3)), np.zeros((2, 3)), PARAMS)
    with pytest.raises(ValueError):
        WaterParams((1.2, 0, 0), (0, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        WaterParams((0, 0, 0), (-1, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        WaterParams((0, 0, 0), (0, 0, 0), (np.inf, 0, 0))


def test_params_config_round_trip(tmp_path):
    PARAMS.save(tmp_path / "w.cfg")
    text = (tmp_path / "w.cfg").read_text()
    assert "veil_r=0.1" in text and "beta_d_b=0.1" in text
    back = WaterParams.load(tmp_path / "w.cfg")
    for name in ("veil", "beta_b", "beta_d"):
        np.testing.assert_array_equal(getattr(back, name), getattr(PARAMS, name))


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load(name):
    p = WaterParams.preset(name)
    assert p.beta_d[0] > p.beta_d[2]  # red attenuates fastest in every preset


def test_segment_weights_empty_medium():
    w = segment_weights(RaySamples(np.zeros(5), np.ones(5)))
    np.testing.assert_array_equal(w, 0.0)


def test_segment_weights_opaque_segment():
    w = segment_weights(RaySamples([20.0], [1.0]))
    assert abs(w[0] - 1.0) <= 1e-8


def test_segment_weights_two_segments():
    w = segment_weights(RaySamples([0.5, 0.5], [1.0, 1.0]))
    e = math.exp(-0.5)
    np.testing.assert_allclose(w, [1 - e, e * (1 - e)], rtol=0, atol=1e-15)
    assert abs(w.sum() - (1 - math.exp(-1))) <= 1e-15


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 5), st.floats(1e-3, 2)), min_size=1, max_size=64))
def test_weight_conservation(pairs):
    sigma, delta = map(np.array, zip(*pairs))
    w = segment_weights(RaySamples(sigma, delta))
    assert np.all(w >= 0)
    assert abs(w.sum() - (1 - math.exp(-float(np.sum(sigma * delta))))) <= 1e-10


def test_ray_samples_validation():
    with pytest.raises(ValueError):
        RaySamples([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        RaySamples([-1.0], [1.0])
    with pytest.raises(ValueError):
        RaySamples([1.0], [0.0])


def test_synthesizer_estimator():
    est = UnderwaterSynthesizer(preset="turbid", veil=(0.1, 0.3, 0.4))
    assert clone(est).get_params() == est.get_params()
    clean = np.full((3, 3, 3), 0.5)
    z = np.full((3, 3), 2.0)
    out = est.fit().transform(clean, z)
    expected, _ = synthesize(RgbImage(clean), z, WaterParams((0.1, 0.3, 0.4), WaterParams.preset("turbid").beta_b,
                                                             WaterParams.preset("turbid").beta_d))
    np.testing.assert_array_equal(out, expected.data)
