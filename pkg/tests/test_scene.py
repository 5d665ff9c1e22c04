import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nloscal.scene import (SceneConfig, TriangleMesh, WallGrid, concentric_square_to_disk,
                           concentric_to_hemisphere, format_config, hemisphere_grid,
                           intersect_rays, load_config, local_frame, parse_config_text,
                           ray_occluded, read_obj, rectangle_mesh, segments_occluded, write_obj)

unit = st.floats(-1.0, 1.0, allow_nan=False)


def test_concentric_center_maps_to_zenith():
    np.testing.assert_allclose(concentric_to_hemisphere(0.0, 0.0), [0, 0, 1], atol=0)


def test_concentric_boundary_maps_to_horizon():
    np.testing.assert_allclose(concentric_to_hemisphere(1.0, 0.0), [1, 0, 0], atol=1e-15)


@given(unit, unit)
def test_concentric_output_is_unit_and_upward(u, v):
    d = concentric_to_hemisphere(u, v)
    assert abs(np.linalg.norm(d) - 1) < 1e-12
    assert d[2] >= 0


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_hemisphere_about_arbitrary_normal(a, b, c):
    n = np.array([a, b, c])
    if np.linalg.norm(n) < 1e-3:
        n = np.array([0.0, 0.0, 1.0])
    n = n / np.linalg.norm(n)
    g = hemisphere_grid(5, n)
    assert np.all(g.flat @ n >= -1e-12)
    t1, t2, nn = local_frame(n)
    frame = np.stack([t1, t2, nn])
    np.testing.assert_allclose(frame @ frame.T, np.eye(3), atol=1e-12)


def test_concentric_map_is_equal_area():
    # every lattice cell's image on the disk has area (pi / 4) * cell area
    n, k = 16, 64
    fine = np.linspace(-1, 1, n * k + 1)
    U, V = np.meshgrid(fine, fine, indexing="ij")
    X, Y = concentric_square_to_disk(U, V)
    # shoelace area of every fine quad, then summed per lattice cell
    x = [X[:-1, :-1], X[1:, :-1], X[1:, 1:], X[:-1, 1:]]
    y = [Y[:-1, :-1], Y[1:, :-1], Y[1:, 1:], Y[:-1, 1:]]
    quad = 0.5 * np.abs(sum(x[m] * y[(m + 1) % 4] - x[(m + 1) % 4] * y[m] for m in range(4)))
    cells = quad.reshape(n, k, n, k).sum(axis=(1, 3))
    target = (2 / n) ** 2 * math.pi / 4
    # polygonal quads under-estimate the curved images only at O(1/k^2)
    np.testing.assert_allclose(cells, target, rtol=1e-3)
    # the integrand itself: |J| = pi / 4 within 1e-6 at points inside every cell
    c = -1 + (2 * np.arange(n) + 0.7) / n
    u, v = (a.ravel() for a in np.meshgrid(c, c + 0.13 / n, indexing="ij"))
    h = 1e-5
    xu1, yu1 = concentric_square_to_disk(u + h, v)
    xu0, yu0 = concentric_square_to_disk(u - h, v)
    xv1, yv1 = concentric_square_to_disk(u, v + h)
    xv0, yv0 = concentric_square_to_disk(u, v - h)
    jac = np.abs((xu1 - xu0) * (yv1 - yv0) - (xv1 - xv0) * (yu1 - yu0)) / (4 * h * h)
    np.testing.assert_allclose(jac, math.pi / 4, rtol=1e-6)


def test_concentric_cosine_weighted_uniformity(rng):
    # uniform (u, v) gives uniform disk points, i.e. cosine-weighted directions:
    # disk cells of equal area receive equal counts
    from scipy.stats import chisquare

    u, v = rng.uniform(-1, 1, (2, 10**6))
    x, y = concentric_square_to_disk(u, v)
    r2 = x * x + y * y
    phi = np.mod(np.arctan2(y, x), 2 * np.pi)
    ring = np.minimum((r2 * 8).astype(int), 7)
    sector = np.minimum((phi / (2 * np.pi) * 8).astype(int), 7)
    counts = np.bincount(ring * 8 + sector, minlength=64)
    assert chisquare(counts).pvalue > 0.01


def test_hemisphere_grid_small_cases():
    g3 = hemisphere_grid(3)
    np.testing.assert_allclose(g3.dirs[1, 1], [0, 0, 1], atol=0)
    g5 = hemisphere_grid(5)
    assert g5.flat.shape == (25, 3)
    np.testing.assert_allclose(np.linalg.norm(g5.flat, axis=1), 1, atol=1e-14)
    assert np.all(g5.flat[:, 2] >= 0)


def test_hemisphere_grid_matches_per_cell_calls():
    n = 64
    g = hemisphere_grid(n)
    c = -1 + (2 * np.arange(n) + 1) / n
    for i in range(0, n, 7):
        for j in range(0, n, 5):
            assert np.array_equal(g.dirs[i, j], concentric_to_hemisphere(c[i], c[j]))


def test_hemisphere_adjacency_is_symmetric():
    g = hemisphere_grid(6)
    for i in range(1, 5):
        for j in range(1, 5):
            assert g.neighbor(*g.neighbor(i, j, "W"), "E") == (i, j)
            assert g.neighbor(*g.neighbor(i, j, "N"), "S") == (i, j)
    assert g.neighbor(0, 0, "N") is None
    with pytest.raises(ValueError):
        hemisphere_grid(2)


def test_confocal_wall_points_coincide():
    w = WallGrid.planar((1.0, 1.0), (4, 3))
    assert np.array_equal(w.laser_points, w.sensor_points)
    assert w.num_sensors == 12
    # row-major ordering: index = ix * ny + iy
    assert w.sensor_points[1, 1] > w.sensor_points[0, 1]
    assert w.sensor_points[3, 0] > w.sensor_points[0, 0]


def test_wall_rejects_inconsistent_points():
    with pytest.raises(ValueError):
        WallGrid(np.zeros((2, 3)), np.zeros((3, 3)), (0, 0, 1), True)
    with pytest.raises(ValueError):
        WallGrid(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), (0, 0, 1), False)


def test_scene_config_validation_and_defaults():
    cfg = SceneConfig(1e-11, 10, (0, 0, 0), (1, 1, 0.5), (4, 4, 5))
    assert cfg.ray_step == pytest.approx(0.05)
    for bad in (dict(bin_width=0), dict(num_bins=0), dict(volume_extent=(1, 1, 0)),
                dict(volume_resolution=(0, 1, 1)), dict(hemisphere_resolution=2),
                dict(ray_step=-1.0), dict(c=0)):
        kw = dict(bin_width=1e-11, num_bins=10, volume_origin=(0, 0, 0),
                  volume_extent=(1, 1, 1), volume_resolution=(2, 2, 2))
        kw.update(bad)
        with pytest.raises(ValueError):
            SceneConfig(**kw)


def test_mesh_validation():
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [1.5])


def test_ray_occluded_trivial_cases():
    a, b = np.array([0, 0, 0.0]), np.array([0, 0, 2.0])
    assert not ray_occluded(TriangleMesh.empty(), a, b)
    tri = TriangleMesh([[-1, -1, 1], [1, -1, 1], [0, 1, 1]], [[0, 1, 2]])
    assert ray_occluded(tri, a, b)
    assert not ray_occluded(tri, a, np.array([0, 0, 0.5]))


def _brute_occluded(mesh, a, b, eps=1e-6):
    d = b - a
    for v0, v1, v2 in mesh.corners:
        e1, e2 = v1 - v0, v2 - v0
        p = np.cross(d, e2)
        det = e1 @ p
        if abs(det) < 1e-14:
            continue
        s = a - v0
        u = (s @ p) / det
        q = np.cross(s, e1)
        v = (d @ q) / det
        t = (e2 @ q) / det
        if u >= 0 and v >= 0 and u + v <= 1 and eps < t < 1 - eps:
            return True
    return False


def test_ray_occluded_matches_brute_force(rng):
    for trial in range(10):
        v = rng.uniform(-1, 1, (300, 3))
        mesh = TriangleMesh(v, np.arange(300).reshape(100, 3))
        a = rng.uniform(-1, 1, (20, 3))
        b = rng.uniform(-1, 1, (20, 3))
        got = segments_occluded(mesh, a, b)
        want = [_brute_occluded(mesh, a[i], b[i]) for i in range(20)]
        assert list(got) == want


def test_intersect_rays_nearest_hit():
    m = rectangle_mesh((0, 0, 1), (2, 2)).merged(rectangle_mesh((0, 0, 2), (2, 2)))
    t, f = intersect_rays(m, [[0, 0, 0], [5, 5, 0]], [[0, 0, 1], [0, 0, 1]])
    assert t[0] == pytest.approx(1.0)
    assert f[0] in (0, 1)
    assert np.isinf(t[1]) and f[1] == -1


def test_obj_round_trip(tmp_path):
    m = rectangle_mesh((0.1, 0.2, 0.5), (0.3, 0.4), albedo=0.25, subdivisions=2)
    write_obj(m, tmp_path / "m.obj", tmp_path / "m.json")
    back = read_obj(tmp_path / "m.obj", tmp_path / "m.json")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.array_equal(back.albedo, m.albedo)
    write_obj(back, tmp_path / "n.obj")
    assert (tmp_path / "n.obj").read_bytes() == (tmp_path / "m.obj").read_bytes()


def test_config_round_trip(tmp_path):
    cfg = SceneConfig(3.2e-11, 512, (-0.5, -0.5, 0.3), (1, 1, 0.4), (32, 32, 32),
                      hemisphere_resolution=16)
    text = format_config(cfg, (1.0, 1.0), (32, 32))
    (tmp_path / "a.cfg").write_text(text)
    cfg2, wall = load_config(tmp_path / "a.cfg")
    assert cfg2 == cfg
    assert wall.num_sensors == 1024
    assert format_config(cfg2, (1.0, 1.0), (32, 32)) == text
    cfg3, _ = load_config(tmp_path / "a.cfg", {"num_bins": 256})
    assert cfg3.num_bins == 256


def test_config_errors():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("colour = red\n")
    with pytest.raises(ValueError, match="expects 3"):
        parse_config_text("volume_origin = 1 2\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config_text("num_bins 4\n")


@settings(max_examples=30)
@given(st.integers(3, 12))
def test_grid_directions_are_unit(n):
    g = hemisphere_grid(n)
    np.testing.assert_allclose(np.linalg.norm(g.flat, axis=1), 1.0, atol=1e-14)
