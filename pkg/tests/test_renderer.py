import math

import numpy as np
import pytest

from gnerflab import autodiff as ad
from gnerflab import renderer as rd

RNG = np.random.default_rng(11)


def test_deterministic_sampling_is_bin_midpoints():
    cfg = rd.QuadratureConfig(n_samples=4, t_n=1.0, t_f=5.0)
    np.testing.assert_allclose(rd.sample_ts(cfg), [1.5, 2.5, 3.5, 4.5])


def test_stratified_sampling_reproducible_and_in_bounds():
    cfg = rd.QuadratureConfig(n_samples=16, stratified=True, t_n=1.0, t_f=5.0, seed=3)
    a = rd.sample_ts(cfg, n_rays=100)
    b = rd.sample_ts(cfg, n_rays=100)
    np.testing.assert_array_equal(a, b)
    big = rd.sample_ts(rd.QuadratureConfig(n_samples=100, stratified=True,
                                           t_n=1.0, t_f=5.0, seed=0), n_rays=1000)
    assert big.min() >= 1.0 and big.max() <= 5.0
    assert np.all(np.diff(big, axis=1) > 0)


def test_quadrature_config_validation():
    with pytest.raises(ValueError):
        rd.QuadratureConfig(n_samples=1)
    with pytest.raises(ValueError):
        rd.QuadratureConfig(t_n=3.0, t_f=2.0)


def test_composite_vacuum():
    t = np.array([1.0, 2.0, 3.0])
    res = rd.composite(np.zeros((2, 3)), np.zeros((2, 3, 3)), t, 4.0)
    np.testing.assert_array_equal(res.color.values, np.zeros((2, 3)))
    np.testing.assert_array_equal(res.opacity.values, np.zeros(2))
    np.testing.assert_array_equal(res.transmittance.values, np.ones((2, 3)))
    np.testing.assert_allclose(res.depth_bg.values, [4.0, 4.0])
    res.check_invariants()


def test_composite_two_sample_closed_form():
    # sigma1*delta1 = ln 2 -> alpha1 = 0.5; sigma2*delta2 = 20 -> opaque
    t = np.array([1.0, 2.0])
    t_f = 3.0
    sigma = np.array([[math.log(2.0), 20.0]])
    c = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    res = rd.composite(sigma, c, t, t_f)
    a1 = 0.5
    t2 = 0.5
    a2 = 1.0 - math.exp(-20.0)
    expect_color = np.array([a1 * 1.0, t2 * a2 * 1.0, 0.0])
    np.testing.assert_allclose(res.color.values[0], expect_color, atol=1e-6)
    expect_depth = a1 * 1.0 + t2 * a2 * 2.0
    assert res.depth.values[0] == pytest.approx(expect_depth, abs=1e-6)
    assert res.transmittance.values[0, 1] == pytest.approx(0.5, abs=1e-9)
    res.check_invariants()


def test_composite_single_opaque_sample_exact():
    t = np.array([2.5])
    res = rd.composite(np.array([[20.0 / 0.5]]), np.array([[[0.2, 0.6, 0.9]]]),
                       t, 3.0)
    a = 1.0 - math.exp(-20.0)
    np.testing.assert_allclose(res.color.values[0], a * np.array([0.2, 0.6, 0.9]),
                               atol=1e-8)
    assert res.depth.values[0] == pytest.approx(a * 2.5, abs=1e-8)
    assert res.opacity.values[0] == pytest.approx(a, abs=1e-12)


def test_composite_rejects_negative_density_and_bad_grid():
    t = np.array([1.0, 2.0])
    with pytest.raises(ValueError):
        rd.composite(np.array([[-0.1, 0.0]]), np.zeros((1, 2, 3)), t, 3.0)
    with pytest.raises(ValueError):
        rd.composite(np.zeros((1, 3)), np.zeros((1, 3, 3)), t, 3.0)


def test_composite_invariants_random():
    for _ in range(50):
        n, s = 4, 16
        t = np.sort(RNG.uniform(1.0, 5.0, size=s))
        sigma = RNG.uniform(0, 30, size=(n, s))
        color = RNG.uniform(0, 1, size=(n, s, 3))
        res = rd.composite(sigma, color, t, 5.5)
        res.check_invariants()


def test_composite_gradients_match_finite_differences():
    n, s = 2, 5
    t = np.sort(RNG.uniform(1.0, 4.0, size=s))
    sigma0 = RNG.uniform(0.1, 3.0, size=(n, s))
    color0 = RNG.uniform(0.1, 0.9, size=(n, s, 3))

    def loss_value(sig, col):
        res = rd.composite(ad.Tensor(sig, dtype=np.float64),
                           ad.Tensor(col, dtype=np.float64), t, 4.5)
        return float((res.color.values ** 2).sum() + (res.depth.values ** 2).sum())

    sig_t = ad.Tensor(sigma0, requires_grad=True, dtype=np.float64)
    col_t = ad.Tensor(color0, requires_grad=True, dtype=np.float64)
    with ad.Tape() as tape:
        res = rd.composite(sig_t, col_t, t, 4.5)
        loss = ad.add(ad.reduce_sum(ad.mul(res.color, res.color)),
                      ad.reduce_sum(ad.mul(res.depth, res.depth)))
    tape.backward(loss)

    h = 1e-5
    for tensor, base in ((sig_t, sigma0), (col_t, color0)):
        flat = base.reshape(-1)
        got = tensor.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value(sigma0, color0)
            flat[i] = orig - h
            dn = loss_value(sigma0, color0)
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(got[i]), 1e-6)
            assert abs(fd - got[i]) / denom <= 1e-4


def test_composite_invariant_to_appended_zero_density():
    # appending at t_f leaves every interval width unchanged (the last
    # interval is t_f - t_N by convention, so an interior append would
    # re-partition it)
    t = np.array([1.0, 2.0, 3.0])
    sigma = np.array([[0.7, 1.3, 0.2]])
    color = RNG.uniform(0, 1, size=(1, 3, 3))
    base = rd.composite(sigma, color, t, 4.0)
    t2 = np.array([1.0, 2.0, 3.0, 4.0])
    sigma2 = np.concatenate([sigma, [[0.0]]], axis=1)
    color2 = np.concatenate([color, RNG.uniform(0, 1, (1, 1, 3))], axis=1)
    ext = rd.composite(sigma2, color2, t2, 4.0)
    np.testing.assert_allclose(base.color.values, ext.color.values, atol=1e-7)
    np.testing.assert_allclose(base.opacity.values, ext.opacity.values, atol=1e-7)


def test_composite_invariant_to_zero_density_insert_in_vacuum():
    # splitting an interval whose density is zero changes nothing
    t = np.array([1.0, 2.0, 3.0])
    sigma = np.array([[0.9, 0.0, 1.4]])
    color = RNG.uniform(0, 1, size=(1, 3, 3))
    base = rd.composite(sigma, color, t, 4.0)
    t2 = np.array([1.0, 2.0, 2.6, 3.0])
    sigma2 = np.array([[0.9, 0.0, 0.0, 1.4]])
    color2 = np.concatenate([color[:, :2], RNG.uniform(0, 1, (1, 1, 3)),
                             color[:, 2:]], axis=1)
    ext = rd.composite(sigma2, color2, t2, 4.0)
    np.testing.assert_allclose(base.color.values, ext.color.values, atol=1e-7)
    np.testing.assert_allclose(base.depth.values, ext.depth.values, atol=1e-7)


def test_composite_mixed_degenerate_cases():
    t = np.sort(RNG.uniform(1, 4, size=6))
    sig_a = RNG.uniform(0, 5, size=(3, 6))
    col_a = RNG.uniform(0, 1, size=(3, 6, 3))
    sig_b = RNG.uniform(0, 5, size=(3, 6))
    col_b = RNG.uniform(0, 1, size=(3, 6, 3))

    same = rd.composite_mixed(sig_a, col_a, sig_a, col_a, t, 4.5,
                              sigma_source="b", color_source="b")
    base = rd.composite(sig_a, col_a, t, 4.5)
    np.testing.assert_array_equal(same.color.values, base.color.values)

    # (sigma_a, c_b) with c_b == c_a equals composite(A)
    mix = rd.composite_mixed(sig_a, col_a, sig_b, col_a.copy(), t, 4.5,
                             sigma_source="a", color_source="b")
    np.testing.assert_array_equal(mix.color.values, base.color.values)


def test_composite_mixed_rejects_mismatched_grids():
    t = np.sort(RNG.uniform(1, 4, size=6))
    with pytest.raises(ValueError):
        rd.composite_mixed(np.zeros((2, 6)), np.zeros((2, 6, 3)),
                           np.zeros((2, 5)), np.zeros((2, 5, 3)), t, 4.5)
