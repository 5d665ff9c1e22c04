import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nloscal.phasor import (EmptyReconstruction, PhasorKernelParams, RSDPlan, SpectralCube,
                            VolumeGrid, angular_frequencies, filter_H, filter_rows_t,
                            kernel_spectrum_t, max_project_xz, normalize_volume, phasor_kernel,
                            read_volume, reconstruct, rsd_direct, rsd_fft, select_band,
                            write_volume)
from nloscal.scene import SceneConfig, WallGrid
from nloscal.synthetic import default_phasor
from nloscal.transient import TransientCube, render_point_scatterers

from conftest import small_scene

BW = 32e-12


def test_kernel_center_and_envelope():
    p = PhasorKernelParams(2 * math.pi * 3e9, 100e-12)
    t = (np.arange(65) - 32) * 10e-12
    k = phasor_kernel(p, t)
    assert k[32] == 1 + 0j
    q = PhasorKernelParams(1e-30, 50e-12)  # effectively zero carrier
    k = phasor_kernel(q, (np.arange(11) - 5) * 50e-12)
    assert k[6].real == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_kernel_spectrum_peak_bin():
    T = 512
    p = PhasorKernelParams(2 * math.pi * 2.3e9, 400e-12)
    spec = np.fft.fft(np.roll(phasor_kernel(p, (np.arange(T) - T // 2) * BW), -(T // 2)))
    df = 1 / (T * BW)
    want = round(p.omega_pf / (2 * math.pi * df))
    assert int(np.argmax(np.abs(spec))) == want
    got = kernel_spectrum_t(p.omega_pf, p.sigma_pf, T, BW).numpy()
    np.testing.assert_allclose(got, spec, atol=1e-9 * np.abs(spec).max())


def test_band_contains_carrier_bin():
    for omega_ghz, sigma_ps in ((1.0, 300), (3.0, 800), (5.5, 150)):
        p = PhasorKernelParams(2 * math.pi * omega_ghz * 1e9, sigma_ps * 1e-12)
        mag = kernel_spectrum_t(p.omega_pf, p.sigma_pf, 512, BW).abs().numpy()
        band = select_band(mag)
        carrier = round(p.omega_pf / (2 * math.pi) * 512 * BW)
        assert band[0] <= carrier <= band[-1]
        assert np.all(np.diff(band) == 1)
        assert np.all(mag[band] > 1e-3 * mag.max())


def test_filter_trivial_and_linear(rng):
    p = PhasorKernelParams(2 * math.pi * 3e9, 300e-12)
    zero = filter_H(TransientCube(np.zeros((3, 256)), BW), p)
    assert not zero.coeffs.any()
    h = TransientCube(rng.uniform(0, 1, (3, 256)), BW)
    a = filter_H(h, p)
    b = filter_H(h.scaled(2.0), p)
    assert np.array_equal(b.coeffs, 2 * a.coeffs)


def test_filter_keeps_kernel_energy():
    p = PhasorKernelParams(2 * math.pi * 3e9, 300e-12)
    T = 256
    sig = phasor_kernel(p, (np.arange(T) - T // 2) * BW).real
    h = TransientCube(np.vstack([np.zeros(T), sig]), BW)
    band = filter_H(h, p).bins
    spec = np.fft.fft(sig)
    # real signal: the band and its mirror image carry the energy
    kept = np.sum(np.abs(spec[band]) ** 2) + np.sum(np.abs(spec[(-band) % T]) ** 2)
    assert kept >= 0.99 * np.sum(np.abs(spec) ** 2)


def test_filter_gradient(rng):
    rows = torch.tensor(rng.uniform(0, 1, (2, 128)))
    om = torch.tensor(2 * math.pi * 3e9, dtype=torch.float64)
    sg = torch.tensor(300e-12, dtype=torch.float64)
    _, band = filter_rows_t(rows, om, sg, BW)

    def f(a, b):
        c, _ = filter_rows_t(rows, a * 1e9, b * 1e-12, BW, band=band)
        return torch.view_as_real(c)

    assert torch.autograd.gradcheck(f, ((om / 1e9).requires_grad_(True),
                                        (sg / 1e-12).requires_grad_(True)))


def test_spectral_cube_validation():
    with pytest.raises(ValueError):
        SpectralCube(np.zeros((2, 3), complex), [0, 1], [0.0, 1.0])
    with pytest.raises(ValueError):
        SpectralCube(np.zeros((2, 2), complex), [0, 2], [0.0, 1.0])


def grid16(depth_res=24, lateral=16):
    wall = WallGrid.planar((0.5, 0.5), (lateral, lateral))
    # the volume spans the wall laterally so the pitches match
    cfg = SceneConfig(BW, 256, (-0.25, -0.25, 0.2), (0.5, 0.5, 0.4),
                      (lateral, lateral, depth_res))
    return wall, cfg


def random_spectrum(rng, wall, cfg, bins=12):
    coeffs = rng.normal(size=(wall.num_sensors, bins)) + 1j * rng.normal(size=(wall.num_sensors, bins))
    start = int(rng.integers(5, 40))
    idx = np.arange(start, start + bins)
    return SpectralCube(coeffs, idx, angular_frequencies(cfg.num_bins, cfg.bin_width)[idx],
                        cfg.num_bins, cfg.bin_width)


def test_rsd_zero_and_quadratic_scaling(rng):
    wall, cfg = small_scene()
    hpf = random_spectrum(rng, wall, cfg, bins=4)
    zero = SpectralCube(np.zeros_like(hpf.coeffs), hpf.bins, hpf.omegas)
    assert not rsd_direct(zero, wall, cfg).values.any()
    assert not rsd_fft(zero, wall, cfg).values.any()
    a = rsd_direct(hpf, wall, cfg).values
    b = rsd_direct(SpectralCube(3 * hpf.coeffs, hpf.bins, hpf.omegas), wall, cfg).values
    np.testing.assert_allclose(b, 9 * a, rtol=1e-12)


def test_rsd_fft_matches_direct_on_random_spectra(rng):
    wall, cfg = grid16(depth_res=8)
    plan = RSDPlan(wall, cfg)
    for _ in range(3):
        hpf = random_spectrum(rng, wall, cfg, bins=6)
        a = rsd_direct(hpf, wall, cfg).values
        b = rsd_fft(hpf, wall, cfg, plan).values
        assert np.max(np.abs(a - b)) / np.max(np.abs(a)) <= 1e-5


def test_rsd_fft_non_confocal_matches_direct(rng):
    pts = WallGrid.planar((0.5, 0.5), (4, 4)).sensor_points
    lasers = WallGrid.planar((0.5, 0.5), (4, 4)).sensor_points
    wall = WallGrid(lasers, pts[::3], (0, 0, 1), False, (len(pts[::3]), 1), (4, 4))
    cfg = SceneConfig(BW, 128, (-0.25, -0.25, 0.2), (0.5, 0.5, 0.2), (4, 4, 5))
    c = rng.normal(size=(16, wall.num_sensors, 5)) + 1j * rng.normal(size=(16, wall.num_sensors, 5))
    idx = np.arange(10, 15)
    hpf = SpectralCube(c, idx, angular_frequencies(128, BW)[idx])
    a = rsd_direct(hpf, wall, cfg).values
    b = rsd_fft(hpf, wall, cfg).values
    assert np.max(np.abs(a - b)) / np.max(a) <= 1e-5


def test_rsd_direct_guard():
    wall = WallGrid.planar((0.5, 0.5), (17, 17))
    cfg = SceneConfig(BW, 64, (-0.25, -0.25, 0.2), (0.5, 0.5, 0.2), (17, 17, 2))
    hpf = SpectralCube(np.zeros((289, 1), complex), [3], [1.0])
    with pytest.raises(ValueError, match="limited"):
        rsd_direct(hpf, wall, cfg)


def test_rsd_plan_requires_matching_pitch():
    wall = WallGrid.planar((0.5, 0.5), (8, 8))
    cfg = SceneConfig(BW, 64, (-0.25, -0.25, 0.2), (0.5, 0.5, 0.2), (16, 16, 2))
    with pytest.raises(ValueError, match="pitch"):
        RSDPlan(wall, cfg)


def _focus(point, depth_res=24):
    wall, cfg = grid16(depth_res)
    h = render_point_scatterers([point], wall, cfg)
    _, vol = reconstruct(h, default_phasor(wall, cfg, 1.0), wall, cfg)
    return np.array(np.unravel_index(np.argmax(vol.values), vol.values.shape)), cfg


def test_point_scatterer_focuses_within_one_voxel():
    wall, cfg = grid16()
    p = np.array([cfg.voxel_centers(0)[9], cfg.voxel_centers(1)[6], cfg.voxel_centers(2)[12]])
    h = render_point_scatterers([p], wall, cfg)
    hpf = filter_H(h, default_phasor(wall, cfg, 1.0))
    vol = rsd_direct(hpf, wall, cfg).values
    idx = np.array(np.unravel_index(np.argmax(vol), vol.shape))
    assert np.all(np.abs(idx - [9, 6, 12]) <= 1)


def test_reconstruction_follows_lateral_shift():
    wall, cfg = grid16()
    x = cfg.voxel_centers(0)
    base = np.array([x[7], cfg.voxel_centers(1)[8], cfg.voxel_centers(2)[10]])
    a, _ = _focus(base)
    b, _ = _focus(base + [x[1] - x[0], 0, 0])
    assert np.array_equal(b - a, [1, 0, 0])


def test_max_projection_and_normalization(rng):
    v = VolumeGrid(np.full((3, 4, 5), 2.5), (0, 0, 0), (1, 1, 1))
    assert np.all(max_project_xz(v) == 2.5)
    vals = np.zeros((3, 4, 5))
    vals[1, 2, 3] = 7.0
    img = max_project_xz(VolumeGrid(vals, (0, 0, 0), (1, 1, 1)))
    assert img.shape == (3, 5)
    assert img[1, 3] == 7.0 and np.count_nonzero(img) == 1
    r = rng.uniform(0, 1, (4, 3, 6))
    want = np.zeros((4, 6))
    for i in range(4):
        for k in range(6):
            want[i, k] = max(r[i, j, k] for j in range(3))
    assert np.array_equal(max_project_xz(r), want)


def test_normalize_volume_properties(rng):
    vals = np.array([1.0, 2.0, 4.0, 0.5]).reshape(1, 2, 2)
    n = normalize_volume(VolumeGrid(vals, (0, 0, 0), (1, 1, 1))).values
    assert np.array_equal(n, vals / 4)  # powers of two survive float32 rounding exactly
    r = VolumeGrid(rng.uniform(0, 3, (5, 6, 7)), (0, 0, 0), (1, 1, 1))
    once = normalize_volume(r)
    assert once.values.max() == 1.0
    assert np.argmax(once.values) == np.argmax(r.values)
    np.testing.assert_allclose(once.values, r.values / r.values.max(), rtol=1e-7)
    assert np.array_equal(normalize_volume(once).values, once.values)
    with pytest.raises(EmptyReconstruction, match="empty reconstruction"):
        normalize_volume(VolumeGrid(np.zeros((2, 2, 2)), (0, 0, 0), (1, 1, 1)))


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([0.1, 0.5, 3.0, 10.0, 1e3]))
def test_normalized_volume_is_scale_invariant(alpha):
    wall, cfg = small_scene()
    h = render_point_scatterers([[0.02, -0.05, 0.4]], wall, cfg)
    pf = default_phasor(wall, cfg, 1.0)
    _, a = reconstruct(h, pf, wall, cfg)
    _, b = reconstruct(h.scaled(alpha), pf, wall, cfg)
    assert np.array_equal(a.values, b.values)


def test_volume_file_round_trip(tmp_path, rng):
    v = VolumeGrid(rng.uniform(0, 1, (3, 4, 5)).astype(np.float32), (0.1, -0.2, 0.3),
                   (0.01, 0.02, 0.03))
    write_volume(tmp_path / "v.raw", v)
    back = read_volume(tmp_path / "v.raw")
    assert np.array_equal(back.values, v.values)
    assert back.origin == v.origin and back.voxel_pitch == v.voxel_pitch
    write_volume(tmp_path / "w.raw", back)
    assert (tmp_path / "w.raw").read_bytes() == (tmp_path / "v.raw").read_bytes()
    assert (tmp_path / "w.raw.json").read_text() == (tmp_path / "v.raw.json").read_text()
    (tmp_path / "v.raw").write_bytes(b"1234")
    with pytest.raises(ValueError, match="size"):
        read_volume(tmp_path / "v.raw")


def test_volume_validation():
    with pytest.raises(ValueError):
        VolumeGrid(np.zeros((2, 2)), (0, 0, 0), (1, 1, 1))
    with pytest.raises(ValueError):
        VolumeGrid(-np.ones((2, 2, 2)), (0, 0, 0), (1, 1, 1))
    with pytest.raises(ValueError):
        PhasorKernelParams(0.0, 1.0)
    p = PhasorKernelParams(1e10, 1e-8)
    with pytest.warns(RuntimeWarning):
        p.check_record(64, BW)
