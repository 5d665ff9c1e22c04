import matplotlib.image as mpimg
import numpy as np

from nloscal import plotting


def test_tone_map_examples():
    img = np.linspace(0, 1, 101).reshape(1, -1)
    out = plotting.tone_map(img)
    assert out.dtype == np.uint8
    assert out[0, 0] == 0 and out[0, -1] == 255
    assert np.all(np.diff(out[0].astype(int)) >= 0)
    # 1% / 99% clip: the extreme samples saturate
    assert out[0, 1] == 0 and out[0, 99] == 255
    assert np.all(plotting.tone_map(np.full((3, 4), 2.5)) == 0)
    assert np.array_equal(plotting.tone_map(img, clip=0.0)[0, [0, 50, 100]], [0, 128, 255])


def test_tone_map_is_scale_invariant(rng):
    img = rng.uniform(size=(20, 30))
    assert np.array_equal(plotting.tone_map(img), plotting.tone_map(img * 7.0 + 3.0))


def test_projection_files(tmp_path, rng):
    vals = rng.uniform(size=(6, 5, 9))
    paths = plotting.save_volume_projections(str(tmp_path / "v"), vals)
    assert mpimg.imread(paths["xz"]).shape[:2] == (6, 9)
    assert mpimg.imread(paths["xy"]).shape[:2] == (6, 5)
    first = open(paths["xz"], "rb").read()
    plotting.save_volume_projections(str(tmp_path / "v"), vals)
    assert open(paths["xz"], "rb").read() == first


def test_report_figures(tmp_path):
    rows = [{"iteration": i, "omega_pf": 1.0 + i, "sigma_pf": 2.0, "I_l": 1.0, "sigma_ls": 3.0,
             "kappa_s": 4.0, "eta_s": 0.1 / (i + 1), "e_h": 1.0 / (i + 1), "e_ipf": 0.5,
             "e_rho": 0.0, "total": 1.5 / (i + 1)} for i in range(5)]
    plotting.convergence_figure(tmp_path / "c.png", rows)
    plotting.noise_figure(tmp_path / "n.png", [100, 10, 1], [25.0, 15.0, 5.0], [0.01, 0.02, 0.05],
                          "depth error (m)")
    for name in ("c.png", "n.png"):
        img = mpimg.imread(tmp_path / name)
        assert img.ndim == 3 and img.shape[0] > 100
