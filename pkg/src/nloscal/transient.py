"""Three-bounce path-space transient rendering.

The same accumulation kernel serves two callers: synthesis of ground-truth
measurements from triangle meshes, and re-rendering from the implicit surface
during calibration (where it has to stay differentiable, hence torch).
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .scene import hemisphere_grid, intersect_rays, segments_occluded

SIGMA_T = 0.62
TRUNCATE_SIGMAS = 4.0
QUADRATURE = "equal-weight concentric cells, mean x 2*pi"

NLTC_MAGIC = b"NLTC"
NLTC_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIddIIII8x")
assert _HEADER.size == 64


@dataclass
class TransientCube:
    """Time-resolved measurements: (S, T) confocal or (L, S, T) otherwise.

    ``t0`` is the time of the center of bin 0, measured from the first wall
    bounce of the laser.
    """

    values: np.ndarray
    bin_width: float
    t0: float = 0.0
    sensor_shape: tuple = None
    laser_shape: tuple = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (2, 3):
            raise ValueError("cube values must be (S, T) or (L, S, T)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube contains non-finite values")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")

    @property
    def confocal(self):
        return self.values.ndim == 2

    @property
    def num_bins(self):
        return self.values.shape[-1]

    @property
    def num_sensors(self):
        return self.values.shape[-2]

    @property
    def num_lasers(self):
        return self.values.shape[0]

    def rows(self):
        """Values flattened to (rows, T); row = l * S + s (or s when confocal)."""
        return self.values.reshape(-1, self.num_bins)

    def with_values(self, values):
        return TransientCube(values, self.bin_width, self.t0, self.sensor_shape, self.laser_shape)

    def scaled(self, alpha):
        return self.with_values(self.values * alpha)


def check_cube_matches(cube, wall, cfg):
    if cube.num_bins != cfg.num_bins:
        raise ValueError(f"cube has {cube.num_bins} bins, config expects {cfg.num_bins}")
    if cube.confocal != wall.confocal:
        raise ValueError("cube and wall disagree on confocal vs non-confocal capture")
    if cube.num_sensors != wall.num_sensors:
        raise ValueError(f"cube has {cube.num_sensors} sensor points, wall has {wall.num_sensors}")
    if not cube.confocal and cube.values.shape[0] != wall.num_lasers:
        raise ValueError("cube laser count does not match the wall")


def empty_cube(wall, cfg):
    shape = (wall.num_sensors, cfg.num_bins) if wall.confocal else \
        (wall.num_lasers, wall.num_sensors, cfg.num_bins)
    return TransientCube(np.zeros(shape), cfg.bin_width, cfg.t0,
                         wall.sensor_shape, wall.laser_shape)


# --- single-path quantities ---------------------------------------------------

@dataclass(frozen=True)
class PathSample:
    x_l: np.ndarray
    x_g: np.ndarray
    x_s: np.ndarray
    n_g: np.ndarray
    n_w: np.ndarray
    rho: float = 1.0

    def __post_init__(self):
        for name in ("x_l", "x_g", "x_s", "n_g", "n_w"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("n_g", "n_w"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a unit vector")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("albedo must lie in [0, 1]")


def tof(path, c):
    if not c > 0:
        raise ValueError("speed of light must be positive")
    return (np.linalg.norm(path.x_g - path.x_l) + np.linalg.norm(path.x_s - path.x_g)) / c


def throughput(path):
    d_lg = np.linalg.norm(path.x_g - path.x_l)
    d_gs = np.linalg.norm(path.x_s - path.x_g)
    if d_lg == 0 or d_gs == 0:
        raise ValueError("surface vertex coincides with a wall point")
    val = path_throughput_t(*(torch.as_tensor(v, dtype=torch.float64)[None]
                              for v in (path.x_l, path.x_g, path.x_s, path.n_g, path.n_w)))
    return float(val[0])


def path_throughput_t(x_l, x_g, x_s, n_g, n_w):
    """Geometric term |cos1 cos2| / d_lg^2 * |cos3 cos4| / d_gs^2 for (P, 3) tensors.

    Visibility is left to the caller.
    """
    a = x_g - x_l
    d_lg = torch.linalg.vector_norm(a, dim=-1)
    u1 = a / d_lg[..., None]
    b = x_s - x_g
    d_gs = torch.linalg.vector_norm(b, dim=-1)
    u2 = b / d_gs[..., None]
    n_w = n_w.expand_as(u1)
    cos1 = (n_w * u1).sum(-1).abs()
    cos2 = (n_g * u1).sum(-1).abs()
    cos3 = (n_g * u2).sum(-1).abs()
    cos4 = (n_w * u2).sum(-1).abs()
    return cos1 * cos2 / d_lg**2 * (cos3 * cos4 / d_gs**2)


def bin_weights(t, bin_width, num_bins, t0=0.0, sigma_t=SIGMA_T):
    """Gaussian splat of an event at time ``t`` onto bins: {bin index: weight}.

    Bins farther than 4 sigma_t from the event, or outside [0, num_bins), are
    dropped.
    """
    if not sigma_t > 0:
        raise ValueError("sigma_t must be positive")
    tb = (t - t0) / bin_width
    k = math.ceil(TRUNCATE_SIGMAS * sigma_t)
    base = math.floor(tb)
    out = {}
    for tau in range(base - k, base + k + 1):
        if 0 <= tau < num_bins and abs(tau - tb) <= TRUNCATE_SIGMAS * sigma_t:
            out[tau] = math.exp(-((tau - tb) ** 2) / (2 * sigma_t**2))
    return out


@dataclass
class SplatBins:
    """Frozen discrete choice of bins per path (for finite-difference checks)."""

    taus: torch.Tensor
    mask: torch.Tensor


def splat_t(values, times, rows, n_rows, num_bins, bin_width, t0=0.0,
            sigma_t=SIGMA_T, frozen=None):
    """Differentiable Gaussian binning of path contributions into (n_rows, T)."""
    tb = (times - t0) / bin_width
    if frozen is None:
        k = math.ceil(TRUNCATE_SIGMAS * sigma_t)
        base = torch.floor(tb.detach()).long()
        taus = base[:, None] + torch.arange(-k, k + 1)
        mask = ((taus - tb.detach()[:, None]).abs() <= TRUNCATE_SIGMAS * sigma_t) \
            & (taus >= 0) & (taus < num_bins)
        frozen = SplatBins(taus, mask)
    taus, mask = frozen.taus, frozen.mask
    w = torch.exp(-((taus - tb[:, None]) ** 2) / (2 * sigma_t**2))
    contrib = (values[:, None] * w)[mask]
    flat = (rows[:, None] * num_bins + taus.clamp(0, num_bins - 1))[mask]
    out = torch.zeros(n_rows * num_bins, dtype=values.dtype)
    out = out.index_add(0, flat, contrib)
    return out.view(n_rows, num_bins), frozen


def hemisphere_weight(n):
    return 2.0 * math.pi / (n * n)


# --- renderers ---------------------------------------------------------------

def _as_t(a):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float64)


def _render_chunk(mesh, wall, cfg, dirs, sensor_idx, sigma_t):
    n_dirs = len(dirs)
    xs = wall.sensor_points[sensor_idx]
    origins = np.repeat(xs, n_dirs, axis=0)
    d = np.tile(dirs, (len(sensor_idx), 1))
    t, f = intersect_rays(mesh, origins, d)
    hit = f >= 0
    if not hit.any():
        return []
    x_g = origins[hit] + t[hit, None] * d[hit]
    n_g = mesh.face_normals[f[hit]]
    rho = mesh.albedo[f[hit]]
    s_of_ray = np.repeat(sensor_idx, n_dirs)[hit]
    x_s = wall.sensor_points[s_of_ray]
    w = hemisphere_weight(cfg.hemisphere_resolution)
    n_w = _as_t(wall.wall_normal)
    parts = []
    lasers = [None] if wall.confocal else range(wall.num_lasers)
    for l in lasers:
        if l is None:
            x_l, keep, rows = x_s, np.ones(len(x_g), bool), s_of_ray
        else:
            x_l = np.broadcast_to(wall.laser_points[l], x_g.shape)
            # the sensor leg is unoccluded by construction (nearest hit)
            keep = ~segments_occluded(mesh, x_l, x_g)
            rows = l * wall.num_sensors + s_of_ray
        if not keep.any():
            continue
        tl, tg, ts = _as_t(x_l[keep]), _as_t(x_g[keep]), _as_t(x_s[keep])
        thr = path_throughput_t(tl, tg, ts, _as_t(n_g[keep]), n_w)
        contrib = _as_t(rho[keep]) * thr * w
        times = (torch.linalg.vector_norm(tg - tl, dim=-1)
                 + torch.linalg.vector_norm(ts - tg, dim=-1)) / cfg.c
        parts.append((contrib, times, torch.as_tensor(rows[keep], dtype=torch.long)))
    return parts


def render_mesh(mesh, wall, cfg, sigma_t=SIGMA_T, threads=1, sensor_chunk=64):
    """Synthesize H_r for a triangle mesh using the hemisphere rays of each sensor point."""
    cube = empty_cube(wall, cfg)
    if len(mesh.triangles) == 0:
        return cube
    dirs = hemisphere_grid(cfg.hemisphere_resolution, wall.wall_normal).flat
    chunks = [np.arange(i, min(i + sensor_chunk, wall.num_sensors))
              for i in range(0, wall.num_sensors, sensor_chunk)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda idx: _render_chunk(mesh, wall, cfg, dirs, idx, sigma_t), chunks))
    else:
        results = [_render_chunk(mesh, wall, cfg, dirs, idx, sigma_t) for idx in chunks]
    n_rows = cube.rows().shape[0]
    acc = torch.zeros(n_rows, cfg.num_bins, dtype=torch.float64)
    # accumulate in chunk order so results do not depend on the thread count
    for parts in results:
        for contrib, times, rows in parts:
            h, _ = splat_t(contrib, times, rows, n_rows, cfg.num_bins, cfg.bin_width, cfg.t0, sigma_t)
            acc += h
    return cube.with_values(acc.numpy().reshape(cube.values.shape))


def render_point_scatterers(points, wall, cfg, albedo=None, sigma_t=SIGMA_T):
    """Isotropic point scatterers: contribution rho / (d_lg^2 d_gs^2), no cosines.

    Handy for focusing tests of the reconstruction where mesh sampling noise
    would only get in the way.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rho = np.ones(len(pts)) if albedo is None else np.asarray(albedo, float).reshape(-1)
    cube = empty_cube(wall, cfg)
    n_s = wall.num_sensors
    lasers = wall.sensor_points if wall.confocal else wall.laser_points
    n_l = 1 if wall.confocal else wall.num_lasers
    ls, ss, gs = np.meshgrid(np.arange(n_l), np.arange(n_s), np.arange(len(pts)), indexing="ij")
    ls, ss, gs = ls.ravel(), ss.ravel(), gs.ravel()
    x_s = wall.sensor_points[ss]
    x_l = x_s if wall.confocal else lasers[ls]
    d_lg = np.linalg.norm(pts[gs] - x_l, axis=1)
    d_gs = np.linalg.norm(x_s - pts[gs], axis=1)
    contrib = rho[gs] / (d_lg**2 * d_gs**2)
    rows = ss if wall.confocal else ls * n_s + ss
    h, _ = splat_t(_as_t(contrib), _as_t((d_lg + d_gs) / cfg.c), torch.as_tensor(rows),
                   cube.rows().shape[0], cfg.num_bins, cfg.bin_width, cfg.t0, sigma_t)
    return cube.with_values(h.numpy().reshape(cube.values.shape))


def render_surface_t(x_g, n_g, rho, hit, x_s, wall, cfg, laser_points=None,
                     sigma_t=SIGMA_T, frozen=None):
    """Differentiable render of implicit-surface hits for a set of sensor points.

    x_g, n_g: (S, R, 3); rho: (S, R); hit: (S, R) bool; x_s: (S, 3).
    Returns (rows, T) with rows = l * S + s over ``laser_points`` (confocal
    when None), plus the frozen bin choice.
    """
    n_sens, n_rays = hit.shape
    s_idx, r_idx = torch.nonzero(hit, as_tuple=True)
    xg = x_g[s_idx, r_idx]
    ng = n_g[s_idx, r_idx]
    rh = rho[s_idx, r_idx]
    xs = x_s[s_idx]
    n_w = torch.as_tensor(wall.wall_normal, dtype=torch.float64)
    w = hemisphere_weight(cfg.hemisphere_resolution)
    if laser_points is None:
        xl_list, n_l = [xs], 1
    else:
        lp = torch.as_tensor(laser_points, dtype=torch.float64)
        xl_list, n_l = [lp[l].expand_as(xs) for l in range(len(lp))], len(lp)
    contribs, times, rows = [], [], []
    for l, xl in enumerate(xl_list):
        thr = path_throughput_t(xl, xg, xs, ng, n_w)
        contribs.append(rh * thr * w)
        times.append((torch.linalg.vector_norm(xg - xl, dim=-1)
                      + torch.linalg.vector_norm(xs - xg, dim=-1)) / cfg.c)
        rows.append(l * n_sens + s_idx)
    if contribs:
        contrib, tt, rr = torch.cat(contribs), torch.cat(times), torch.cat(rows)
    else:
        contrib = tt = torch.zeros(0, dtype=torch.float64)
        rr = torch.zeros(0, dtype=torch.long)
    return splat_t(contrib, tt, rr, n_l * n_sens, cfg.num_bins, cfg.bin_width, cfg.t0,
                   sigma_t, frozen)


def render_implicit(surface, rho_grid, wall, cfg, sigma_t=SIGMA_T):
    """H_r from an implicit surface; visibility is assumed (no occlusion test)."""
    from .surface import sample_albedo_t

    n = cfg.hemisphere_resolution
    if surface.hit.shape != (wall.num_sensors, n, n):
        raise ValueError("implicit surface does not match the wall / hemisphere resolution")
    cube = empty_cube(wall, cfg)
    S = wall.num_sensors
    x_g = _as_t(surface.x_g.reshape(S, n * n, 3))
    n_g = _as_t(surface.n_g.reshape(S, n * n, 3))
    hit = torch.as_tensor(surface.hit.reshape(S, n * n))
    with torch.no_grad():
        rho = sample_albedo_t(rho_grid, x_g.reshape(-1, 3)).reshape(S, n * n)
        h, _ = render_surface_t(x_g, n_g, rho, hit, _as_t(wall.sensor_points), wall, cfg,
                                None if wall.confocal else wall.laser_points, sigma_t)
    return cube.with_values(h.numpy().reshape(cube.values.shape))


# --- file format ---------------------------------------------------------------

def write_cube(path, cube):
    """NLTC: 64-byte little-endian header then float32 values in (l, s, t) order."""
    L = 1 if cube.confocal else cube.values.shape[0]
    S, T = cube.num_sensors, cube.num_bins
    ss = cube.sensor_shape or (S, 1)
    ls = cube.laser_shape or ((S, 1) if cube.confocal else (L, 1))
    header = _HEADER.pack(NLTC_MAGIC, NLTC_VERSION, L, S, T, int(cube.confocal),
                          float(cube.bin_width), float(cube.t0),
                          int(ss[0]), int(ss[1]), int(ls[0]), int(ls[1]))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def read_cube(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 64:
        raise ValueError(f"{path}: truncated NLTC header")
    magic, version, L, S, T, confocal, bw, t0, sr, sc, lr, lc = _HEADER.unpack(raw[:64])
    if magic != NLTC_MAGIC:
        raise ValueError(f"{path}: not an NLTC file")
    if version != NLTC_VERSION:
        raise ValueError(f"{path}: unsupported NLTC version {version}")
    shape = (S, T) if confocal else (L, S, T)
    count = int(np.prod(shape))
    if len(raw) != 64 + 4 * count:
        raise ValueError(f"{path}: payload size does not match header")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=64)
    return TransientCube(data.astype(np.float64).reshape(shape), bw, t0, (sr, sc), (lr, lc))


def cube_metadata(cube, **extra):
    meta = {
        "format": "NLTC", "version": NLTC_VERSION, "confocal": cube.confocal,
        "shape": list(cube.values.shape), "bin_width": cube.bin_width, "t0": cube.t0,
        "sensor_shape": list(cube.sensor_shape) if cube.sensor_shape else None,
        "laser_shape": list(cube.laser_shape) if cube.laser_shape else None,
        "dtype": "float32 little-endian", "order": "(l, s, t) row-major",
        "sigma_t_bins": SIGMA_T, "quadrature": QUADRATURE,
    }
    meta.update(extra)
    return meta


def write_cube_metadata(path, cube, **extra):
    with open(path, "w") as fh:
        json.dump(cube_metadata(cube, **extra), fh, indent=2, sort_keys=True)
