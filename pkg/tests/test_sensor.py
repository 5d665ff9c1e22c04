import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nloscal.sensor import (LaserSensorParams, add_poisson_noise, apply_sensor,
                            default_support_bins, min_support_bins, photon_scale_for_snr,
                            psi_kernel, psi_kernel_t, snr_db)
from nloscal.transient import TransientCube

BW = 32e-12


def params(sigma_bins=2.0, kappa_per_bin=0.5, I_l=1.0, eta=0.0):
    return LaserSensorParams(I_l, sigma_bins * BW, kappa_per_bin / BW, eta)


def emg_oracle(p, K, fine=2000):
    """Dense midpoint-rule convolution of the Gaussian with the exponential decay."""
    h = BW / fine
    s = (np.arange(int(60 / (p.kappa_s * h)) + 1) + 0.5) * h
    decay = p.kappa_s * np.exp(-p.kappa_s * s) * h
    t = np.arange(-K, K + 1) * BW
    g = p.I_l / (p.sigma_ls * math.sqrt(2 * math.pi)) * np.exp(-(t[:, None] - s[None]) ** 2
                                                               / (2 * p.sigma_ls**2))
    return g @ decay


def test_kernel_integrates_to_intensity():
    p = params(I_l=3.5)
    k = psi_kernel(p, BW)
    assert len(k) == 2 * default_support_bins(p.sigma_ls, p.kappa_s, BW) + 1
    assert abs(k.sum() * BW - p.I_l) / p.I_l < 1e-4


def test_kernel_matches_dense_convolution():
    p = params(2.0, 0.5, 1.0)
    k = psi_kernel(p, BW)
    K = (len(k) - 1) // 2
    want = emg_oracle(p, K)
    np.testing.assert_allclose(k, want, rtol=1e-6, atol=1e-6 * want.max())


def test_fast_decay_collapses_to_gaussian():
    p = params(2.0, 1e3, 2.0)
    k = psi_kernel(p, BW)
    K = (len(k) - 1) // 2
    t = np.arange(-K, K + 1) * BW
    g = p.I_l / (p.sigma_ls * math.sqrt(2 * math.pi)) * np.exp(-t**2 / (2 * p.sigma_ls**2))
    assert np.max(np.abs(k - g)) < 1e-3 * g.max()


@settings(max_examples=25, deadline=None)
@given(st.floats(1.0, 4.0), st.floats(0.1, 3.0), st.floats(0.1, 10.0))
def test_kernel_shape(sigma_bins, kappa_per_bin, I_l):
    p = params(sigma_bins, kappa_per_bin, I_l)
    k = psi_kernel(p, BW)
    assert np.all(k >= 0)
    mode = int(np.argmax(k))
    assert np.all(np.diff(k[mode:]) <= 1e-15 * k.max())
    assert abs(k.sum() * BW - I_l) / I_l < 1e-4


def test_kernel_support_rules():
    p = params(2.0, 0.5)
    assert min_support_bins(p.sigma_ls, p.kappa_s, BW) == math.ceil(4 * 2 + 6 / 0.5)
    with pytest.raises(ValueError):
        psi_kernel(p, BW, support_bins=5)
    with pytest.raises(ValueError):
        LaserSensorParams(1.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        LaserSensorParams(1.0, 1.0, 1.0, -0.1)


def test_kernel_gradients():
    args = [torch.tensor(v, dtype=torch.float64, requires_grad=True)
            for v in (1.3, 2.0 * BW, 0.5 / BW)]
    scale = torch.tensor([1.0, BW, 1 / BW], dtype=torch.float64)
    f = lambda a, b, c: psi_kernel_t(a * scale[0], b * scale[1], c * scale[2], BW, 30) * BW
    unit = [(a.detach() / s).requires_grad_(True) for a, s in zip(args, scale)]
    assert torch.autograd.gradcheck(f, unit)


def cube(values):
    return TransientCube(np.asarray(values, float), BW)


def test_apply_sensor_trivial_cases():
    out = apply_sensor(cube(np.zeros((3, 64))), params(eta=0.3))
    assert np.all(out.values == 0.3)
    p = params()
    k = psi_kernel(p, BW)
    K = (len(k) - 1) // 2
    h = np.zeros((1, 128))
    h[0, 60] = 1.0
    out = apply_sensor(cube(h), p).values[0]
    np.testing.assert_allclose(out[60 - K:60 + K + 1], k, rtol=1e-14)
    assert np.all(out[:60 - K] == 0) and np.all(out[60 + K + 1:] == 0)


def test_apply_sensor_matches_fft_oracle(rng):
    # I_l in units of bin_width keeps the kernel O(1), so an absolute tolerance is meaningful
    p = params(1.5, 0.7, 2.0 * BW, 0.1)
    h = rng.uniform(0, 1, (5, 200))
    k = psi_kernel(p, BW)
    K = (len(k) - 1) // 2
    n = 200 + len(k) - 1
    full = np.fft.irfft(np.fft.rfft(h, n) * np.fft.rfft(k, n), n)
    want = full[:, K:K + 200] + p.eta_s
    np.testing.assert_allclose(apply_sensor(cube(h), p).values, want, rtol=0, atol=1e-9)


def test_apply_sensor_linear_and_shift_invariant(rng):
    p = params(eta=0.2)
    h1, h2 = rng.uniform(0, 1, (2, 3, 128))
    a = 1.7
    lhs = apply_sensor(cube(a * h1 + h2), p).values
    rhs = a * apply_sensor(cube(h1), p).values + apply_sensor(cube(h2), p).values - p.eta_s
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    imp = np.zeros((1, 128))
    imp[0, 50] = 1
    shifted = np.roll(imp, 7, axis=1)
    o1 = apply_sensor(cube(imp), p).values[0]
    o2 = apply_sensor(cube(shifted), p).values[0]
    np.testing.assert_allclose(np.roll(o1, 7), o2, atol=1e-15)


def test_poisson_noise_limits_and_determinism(rng):
    h = cube(rng.uniform(1, 5, (4, 64)))
    big = add_poisson_noise(h, 1e9, seed=3)
    assert np.all(np.abs(big.values - h.values) <= 1e-3 * h.values)
    a = add_poisson_noise(h, 2.0, seed=7)
    b = add_poisson_noise(h, 2.0, seed=7)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, add_poisson_noise(h, 2.0, seed=8).values)
    with pytest.raises(ValueError):
        add_poisson_noise(h, 0.0, 1)
    with pytest.raises(ValueError):
        add_poisson_noise(cube(-np.ones((1, 4))), 1.0, 1)


def test_poisson_noise_mean():
    h = cube(np.full((100, 100), 4.0))
    noisy = add_poisson_noise(h, 1.0, seed=11)
    assert abs(noisy.values.mean() - 4.0) < 0.07


def test_snr_examples(rng):
    clean = cube(rng.uniform(0, 1, (3, 50)))
    assert snr_db(clean, clean) == math.inf
    c = 0.01
    want = 10 * math.log10(np.sum(clean.values**2) / (clean.values.size * c * c))
    assert snr_db(clean, cube(clean.values + c)) == pytest.approx(want, rel=1e-12)
    noisy = cube(clean.values + rng.normal(0, 0.05, clean.values.shape))
    err = np.sum((clean.values - noisy.values) ** 2)
    assert snr_db(clean, noisy) == pytest.approx(10 * math.log10(np.sum(clean.values**2) / err),
                                                 rel=1e-12)
    with pytest.raises(ValueError):
        snr_db(clean, cube(np.zeros((2, 50))))


def test_photon_scale_hits_target_snr(rng):
    clean = cube(rng.uniform(0, 10, (50, 200)))
    for target in (30.0, 20.0, 10.0):
        noisy = add_poisson_noise(clean, photon_scale_for_snr(clean, target), seed=5)
        assert abs(snr_db(clean, noisy) - target) < 0.2
