import numpy as np
import pytest
from sklearn.base import clone

from _scenes import make_scene, psnr
from aquathru import kvconfig
from aquathru.formation import WaterParams, synthesize
from aquathru.raster_io import RangeMap
from aquathru.seathru import (
    AttenuationEstimate,
    BackscatterFit,
    EmptyEstimateError,
    IlluminantMap,
    InsufficientRangeDiversity,
    SeaThruRestorer,
    direct_signal,
    enhance,
    estimate_attenuation,
    estimate_backscatter,
    estimate_illuminant,
    restore,
    restore_from_range,
)
from aquathru.ulap import UlapCoefficients, fit_ulap

VEIL = np.array([0.12, 0.31, 0.40])
BETA_B = np.array([0.9, 0.35, 0.25])


def pure_backscatter_scene(seed=0, size=80, veil=VEIL, beta_b=BETA_B):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.5, 8.0, (size, size))
    params = WaterParams(veil, beta_b, (0.1, 0.1, 0.1))
    img, _ = synthesize(np.zeros((size, size, 3)), z, params)
    return img.data, z


# -- backscatter --------------------------------------------------------------

def test_backscatter_recovery_noiseless():
    img, z = pure_backscatter_scene()
    fit = estimate_backscatter(img, z)
    assert np.all(np.abs(fit.veil / VEIL - 1) <= 0.02)
    assert np.all(np.abs(fit.beta_b / BETA_B - 1) <= 0.02)
    assert fit.counts.shape == (3, 10)


def _noisy_backscatter_errors(noise):
    errs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        img, z = pure_backscatter_scene(seed, size=100)
        fit = estimate_backscatter(np.clip(img + noise(rng, img.shape), 0, 1), z)
        errs.append(np.concatenate([fit.veil / VEIL - 1, fit.beta_b / BETA_B - 1]))
    return np.array(errs)


def test_backscatter_bounded_noise():
    errs = _noisy_backscatter_errors(lambda rng, s: rng.uniform(-0.01, 0.01, s))
    assert np.max(np.abs(errs)) <= 0.10


def test_backscatter_gaussian_noise_biases_veil_low():
    # The darkest 1% of a noisy bin sits about 2.3 sigma below the curve, so
    # unbounded noise pulls the dim red veil down by roughly 0.023 / 0.12.
    errs = _noisy_backscatter_errors(lambda rng, s: rng.normal(0, 0.01, s))
    assert np.all(errs[:, 0] < -0.15)


def test_zero_backscatter_scene():
    rng = np.random.default_rng(1)
    z = rng.uniform(0.5, 8.0, (40, 40))
    img = rng.uniform(0, 1, (40, 40, 3))
    img[rng.uniform(size=(40, 40)) < 0.1] = 0.0  # dark pixels at every range
    fit = estimate_backscatter(img, z)
    assert np.all(fit.veil <= 1e-3)


def test_constant_range_rejected():
    with pytest.raises(InsufficientRangeDiversity):
        estimate_backscatter(np.zeros((10, 10, 3)), np.full((10, 10), 3.0))


def test_too_few_usable_bins():
    # two range clusters only: 8 of the 10 bins are empty
    z = np.where(np.arange(100).reshape(10, 10) < 50, 1.0, 5.0)
    with pytest.raises(InsufficientRangeDiversity, match="bins"):
        estimate_backscatter(np.zeros((10, 10, 3)), z)


def test_backscatter_shuffle_invariant():
    img, z = pure_backscatter_scene(seed=2, size=40)
    img = img + np.random.default_rng(3).normal(0, 0.01, img.shape)
    img = np.clip(img, 0, 1)
    perm = np.random.default_rng(4).permutation(z.size)
    img2 = img.reshape(-1, 3)[perm].reshape(img.shape)
    z2 = z.ravel()[perm].reshape(z.shape)
    a, b = estimate_backscatter(img, z), estimate_backscatter(img2, z2)
    np.testing.assert_array_equal(a.veil, b.veil)
    np.testing.assert_array_equal(a.beta_b, b.beta_b)


def test_backscatter_parallel_channels_match_serial():
    img, z = pure_backscatter_scene(seed=5, size=40)
    a = estimate_backscatter(img, z, n_jobs=1)
    b = estimate_backscatter(img, z, n_jobs=3)
    np.testing.assert_array_equal(a.veil, b.veil)
    np.testing.assert_array_equal(a.beta_b, b.beta_b)


def test_invalid_range_pixels_ignored():
    img, z = pure_backscatter_scene(seed=6, size=40)
    valid = np.ones(z.shape, dtype=bool)
    valid[:5] = False
    img = img.copy()
    img[:5] = 1.0  # garbage where range is missing
    fit = estimate_backscatter(img, RangeMap(z, valid))
    assert np.all(np.abs(fit.veil / VEIL - 1) <= 0.02)


def test_backscatter_config_round_trip():
    img, z = pure_backscatter_scene(seed=7, size=30)
    fit = estimate_backscatter(img, z)
    back = BackscatterFit.from_config(kvconfig.parse(kvconfig.dump(fit.to_config())))
    np.testing.assert_array_equal(back.veil, fit.veil)
    np.testing.assert_array_equal(back.beta_b, fit.beta_b)
    np.testing.assert_array_equal(back.counts, fit.counts)
    np.testing.assert_array_equal(back.edges, fit.edges)


# -- illuminant ---------------------------------------------------------------

@pytest.mark.parametrize("v", [0.1, 0.3, 0.7])
def test_illuminant_constant_fixed_point(v):
    illum = estimate_illuminant(np.full((6, 9, 3), v), np.ones((6, 9)))
    np.testing.assert_allclose(illum.data, min(1.0, 2 * v), rtol=0, atol=1e-12)


def test_illuminant_p_one_is_pointwise():
    d = np.random.default_rng(8).uniform(0, 1, (5, 5, 3))
    illum = estimate_illuminant(d, np.ones((5, 5)), p=1.0)
    np.testing.assert_array_equal(illum.data, np.clip(2 * np.maximum(d, 1e-4), 1e-4, 1.0))


def test_illuminant_two_region_monotone_rows():
    d = np.full((8, 16, 3), 0.2)
    d[:, 8:] = 0.6
    illum = estimate_illuminant(d, np.ones((8, 16)), gray_world=1.0)
    a = illum.data[..., 0]
    assert np.all(np.diff(a, axis=1) >= 0)
    # smoothing crosses the boundary: no jump equal to the raw step
    assert np.max(np.diff(a, axis=1)) < 0.4
    assert a[0, 7] > 0.2 and a[0, 8] < 0.6


def test_illuminant_rejects_bad_p():
    with pytest.raises(ValueError):
        estimate_illuminant(np.full((3, 3, 3), 0.5), np.ones((3, 3)), p=0.0)


# -- attenuation --------------------------------------------------------------

def test_attenuation_scalar_example():
    illum = IlluminantMap(np.full((1, 1, 3), np.exp(-0.6)))
    att = estimate_attenuation(illum, np.full((1, 1), 2.0), "pixel")
    np.testing.assert_allclose(att.values, 0.3, rtol=0, atol=1e-12)


def test_attenuation_unit_illuminant():
    illum = IlluminantMap(np.ones((3, 3, 3)))
    att = estimate_attenuation(illum, np.full((3, 3), 4.0), "pixel")
    np.testing.assert_array_equal(att.values, 0.0)


def _exp_illuminant(seed, beta=0.45, size=60):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.5, 6.0, (size, size))
    return z, np.repeat(np.exp(-beta * z)[..., None], 3, axis=2)


def test_attenuation_binned_medians_recover_rate():
    z, e = _exp_illuminant(9)
    att = estimate_attenuation(IlluminantMap(e), z)
    assert att.values.shape == (10, 3)
    assert np.max(np.abs(att.values - 0.45)) <= 1e-6


def test_attenuation_median_robust_to_contamination():
    z, e = _exp_illuminant(10)
    att0 = estimate_attenuation(IlluminantMap(e), z)
    rng = np.random.default_rng(11)
    beta = np.full(z.shape, 0.45)
    # contaminate 20% of each bin, half pushed up and half pushed down
    bins = np.clip(np.searchsorted(att0.edges, z, side="right") - 1, 0, 9)
    for b in range(10):
        idx = rng.permutation(np.flatnonzero(bins.ravel() == b))
        k = len(idx) // 10
        beta.ravel()[idx[:k]] = rng.uniform(0.6, 2.0, k)
        beta.ravel()[idx[k:2 * k]] = rng.uniform(0.0, 0.3, k)
    noisy = np.repeat(np.exp(-beta * z)[..., None], 3, axis=2)
    att = estimate_attenuation(IlluminantMap(noisy), z, edges=att0.edges)
    assert np.max(np.abs(att.values - att0.values)) <= 1e-9


def test_attenuation_needs_range_above_floor():
    with pytest.raises(EmptyEstimateError):
        estimate_attenuation(IlluminantMap(np.full((2, 2, 3), 0.5)), np.full((2, 2), 0.01))


def test_attenuation_fills_empty_bins_from_nearest():
    z = np.array([[1.0, 1.1, 4.9, 5.0]])
    illum = IlluminantMap(np.repeat(np.exp(-np.array([[0.2, 0.2, 0.6, 0.6]]) * z)[..., None], 3, axis=2))
    att = estimate_attenuation(illum, z, edges=np.linspace(1.0, 5.0, 5))
    np.testing.assert_allclose(att.values[:, 0], [0.2, 0.2, 0.6, 0.6], atol=1e-12)


def test_attenuation_config_round_trip():
    z, e = _exp_illuminant(12, size=20)
    att = estimate_attenuation(IlluminantMap(e), z)
    text = kvconfig.dump(att.to_config())
    assert len(kvconfig.parse(text)["beta_d_r"].split(",")) == 10
    back = AttenuationEstimate.from_config(kvconfig.parse(text))
    np.testing.assert_array_equal(back.values, att.values)
    np.testing.assert_array_equal(back.edges, att.edges)


# -- restore ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_restore_inverts_synthesis_with_true_params(seed):
    clean, z, params = make_scene(seed)
    img, srep = synthesize(clean, z, params)
    out, rrep = restore(img, z, BackscatterFit.from_params(params),
                        AttenuationEstimate.uniform(params.beta_d, z.shape))
    ok = ~srep.clamped_mask & ~rrep.clamped_mask
    assert ok.mean() > 0.9
    assert np.max(np.abs(out.data[ok] - clean[ok])) <= 1e-6


def test_restore_zero_range_is_identity():
    img = np.random.default_rng(13).uniform(0, 1, (5, 5, 3))
    bs = BackscatterFit(VEIL, BETA_B)
    out, rep = restore(img, np.zeros((5, 5)), bs, AttenuationEstimate.uniform((0.5, 0.2, 0.1), (5, 5)))
    np.testing.assert_array_equal(out.data, img)
    assert rep.clamped_fraction == 0.0


def test_restore_reports_clamping():
    img = np.full((2, 2, 3), 0.9)
    bs = BackscatterFit((0, 0, 0), (0, 0, 0))
    out, rep = restore(img, np.full((2, 2), 5.0), bs, AttenuationEstimate.uniform((1, 1, 1), (2, 2)))
    assert rep.clamped_fraction == 1.0
    np.testing.assert_array_equal(out.data, 1.0)


def test_restore_dimension_mismatch():
    with pytest.raises(ValueError):
        restore(np.zeros((2, 2, 3)), np.zeros((3, 3)), BackscatterFit(VEIL, BETA_B),
                AttenuationEstimate.uniform((0, 0, 0), (2, 2)))


@pytest.mark.parametrize("seed", range(3))
def test_estimated_round_trip_psnr(seed):
    clean, z, params = make_scene(seed)
    img, _ = synthesize(clean, z, params)
    out, report = restore_from_range(img, z)
    ok = ~report.restore.clamped_mask
    assert psnr(out.data[ok], clean[ok]) >= 25.0


def test_direct_signal_floor():
    bs = BackscatterFit((0.5, 0.5, 0.5), (10, 10, 10))
    d = direct_signal(np.zeros((2, 2, 3)), np.full((2, 2), 3.0), bs)
    np.testing.assert_array_equal(d.data, 1e-4)


# -- enhance ------------------------------------------------------------------

def test_enhance_flat_range_passes_neutral_image_through():
    gray = np.repeat(np.random.default_rng(14).uniform(0, 1, (6, 6, 1)), 3, axis=2)
    for coeffs in (UlapCoefficients(0.5, 0.0, 0.0), UlapCoefficients(0.2, 1.0, -1.0)):
        out, report = enhance(gray, coeffs, 3.0)
        assert report.passthrough
        np.testing.assert_array_equal(out.data, gray)


def test_enhance_rejects_bad_scale():
    with pytest.raises(ValueError):
        enhance(np.zeros((2, 2, 3)), UlapCoefficients(0, 1, 0), 0.0)


def test_true_range_reduction_matches_estimator():
    clean, z, params = make_scene(20)
    img, _ = synthesize(clean, z, params)
    out, report = restore_from_range(img, z)
    est = SeaThruRestorer()
    np.testing.assert_array_equal(est.fit_transform(img.data, z), out.data)
    assert clone(est).get_params() == est.get_params()
    ok = ~report.restore.clamped_mask
    assert psnr(out.data[ok], clean[ok]) >= 25.0


def test_estimator_transform_reuses_fit_range():
    clean, z, params = make_scene(21)
    img, _ = synthesize(clean, z, params)
    est = SeaThruRestorer().fit(img.data, z)
    np.testing.assert_array_equal(est.transform(img.data), est.transform(img.data, z))


@pytest.mark.parametrize("seed", range(5))
def test_enhance_moves_red_mean_toward_clean(seed):
    # statistical oracle over five scenes: ULAP fit to the true range, then
    # the full chain on the predicted range
    clean, z, params = make_scene(100 + seed)
    img, _ = synthesize(clean, z, params)
    coeffs, _ = fit_ulap([(img.data, z)])
    out, report = enhance(img, coeffs, 1.0)
    assert not report.passthrough
    target = clean[..., 0].mean()
    assert abs(out.data[..., 0].mean() - target) < abs(img.data[..., 0].mean() - target)


def test_enhance_is_deterministic():
    clean, z, params = make_scene(30)
    img, _ = synthesize(clean, z, params)
    coeffs, _ = fit_ulap([(img.data, z)])
    a, _ = enhance(img, coeffs, 1.0)
    b, _ = enhance(img, coeffs, 1.0, n_jobs=3)
    assert a.data.tobytes() == b.data.tobytes()
