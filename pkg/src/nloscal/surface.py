"""Implicit geometry from the phasor-field volume.

For every sensor point we march the concentric hemisphere rays through the
(normalized) intensity volume, take a softargmax depth per ray and estimate
normals from the four lattice neighbours. Albedo lives on the voxel lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .phasor import VolumeGrid
from .scene import hemisphere_grid

BETA = 1e3
THRESHOLD_SYNTHETIC = 0.05
THRESHOLD_REAL = 0.2
# weights below exp(-PRUNE) vanish against the peak weight 1 in float64
PRUNE = 60.0


@dataclass
class AlbedoGrid:
    values: np.ndarray
    origin: tuple
    voxel_pitch: tuple

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=float), 0.0, 1.0)
        self.origin = tuple(float(x) for x in self.origin)
        self.voxel_pitch = tuple(float(x) for x in self.voxel_pitch)

    @classmethod
    def constant(cls, cfg, value=0.5):
        return cls(np.full(cfg.volume_resolution, float(value)), cfg.volume_origin, cfg.voxel_pitch)

    def scaled(self, alpha):
        return AlbedoGrid(self.values * alpha, self.origin, self.voxel_pitch)


@dataclass
class ImplicitSurface:
    """Per sensor point, an n x n concentric grid of ray records."""

    hit: np.ndarray       # (S, n, n) bool
    depth: np.ndarray     # (S, n, n) meters, 0 where no hit
    x_g: np.ndarray       # (S, n, n, 3)
    n_g: np.ndarray       # (S, n, n, 3)
    fallback: np.ndarray  # (S, n, n) bool, normal is -dir
    dirs: np.ndarray      # (n, n, 3)
    sensor_points: np.ndarray

    @property
    def num_points(self):
        return int(self.hit.sum())

    @classmethod
    def empty(cls, wall, n):
        S = wall.num_sensors
        dirs = hemisphere_grid(n, wall.wall_normal).dirs
        z = np.zeros((S, n, n))
        return cls(np.zeros((S, n, n), bool), z, np.zeros((S, n, n, 3)),
                   np.broadcast_to(-dirs, (S, n, n, 3)).copy(), np.ones((S, n, n), bool),
                   dirs, wall.sensor_points)


# --- sampling -------------------------------------------------------------------

def _grid_meta(grid):
    return (torch.as_tensor(grid.origin, dtype=torch.float64),
            torch.as_tensor(grid.voxel_pitch, dtype=torch.float64))


def _lerp(a, b, f):
    # exact at f == 0 and for a == b
    return a + f * (b - a)


def trilinear_t(values, origin, pitch, pts):
    """Nested lerps with voxel values at cell centers; zero outside the box.

    Points in the half-voxel shell between the outer centers and the box
    faces take the edge values.
    """
    shape = values.shape
    n = torch.as_tensor(shape, dtype=torch.float64)
    extent = pitch * n
    tol = 1e-9 * pitch
    inside = ((pts >= origin - tol) & (pts <= origin + extent + tol)).all(dim=-1)
    u = (pts - origin) / pitch - 0.5
    # snap round-off next to a lattice coordinate so centers return stored values;
    # the correction is detached, gradients are those of the unsnapped u
    near = torch.round(u.detach())
    u = torch.where((u.detach() - near).abs() < 1e-9, u + (near - u).detach(), u)
    u = torch.minimum(torch.clamp(u, min=0.0), n - 1)
    i0 = torch.floor(u.detach()).long()
    i0 = torch.minimum(i0, torch.clamp(torch.as_tensor(shape) - 2, min=0))
    f = u - i0
    i1 = torch.minimum(i0 + 1, torch.as_tensor(shape) - 1)
    flat = values.reshape(-1)
    sy, sz = shape[1] * shape[2], shape[2]

    def at(ix, iy, iz):
        return flat[ix * sy + iy * sz + iz]

    def along_z(ix, iy):
        return _lerp(at(ix, iy, i0[:, 2]), at(ix, iy, i1[:, 2]), f[:, 2])

    def along_y(ix):
        return _lerp(along_z(ix, i0[:, 1]), along_z(ix, i1[:, 1]), f[:, 1])

    out = _lerp(along_y(i0[:, 0]), along_y(i1[:, 0]), f[:, 0])
    return torch.where(inside, out, torch.zeros_like(out))


def trilinear(v, p):
    origin, pitch = _grid_meta(v)
    pts = torch.as_tensor(np.asarray(p, dtype=float).reshape(-1, 3))
    with torch.no_grad():
        out = trilinear_t(torch.as_tensor(v.values), origin, pitch, pts).numpy()
    return float(out[0]) if np.ndim(p) == 1 else out


def sample_albedo_t(grid, pts, values=None):
    origin, pitch = _grid_meta(grid)
    vals = torch.as_tensor(grid.values) if values is None else values
    return torch.clamp(trilinear_t(vals, origin, pitch, pts), 0.0, 1.0)


def sample_albedo(g, x):
    with torch.no_grad():
        out = sample_albedo_t(g, torch.as_tensor(np.asarray(x, float).reshape(-1, 3))).numpy()
    return float(out[0]) if np.ndim(x) == 1 else out


# --- ray marching ----------------------------------------------------------------

def ray_sample_range(origins, dirs, box_lo, box_hi, step):
    """First sample index and sample count per ray for d_i = (i + 1/2) * step."""
    o = np.asarray(origins, float).reshape(-1, 3)
    d = np.asarray(dirs, float).reshape(-1, 3)
    lo, hi = np.asarray(box_lo, float), np.asarray(box_hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    par = d == 0
    inside_slab = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    # a ray that misses the box has t_enter = inf; give it an empty range
    miss = ~(np.isfinite(t_enter) & np.isfinite(t_exit) & (t_exit >= t_enter))
    first = np.where(miss, 0.0, np.ceil(np.where(miss, 0.0, t_enter) / step - 0.5)).astype(np.int64)
    last = np.where(miss, -1.0, np.floor(np.where(miss, 0.0, t_exit) / step - 0.5)).astype(np.int64)
    count = np.clip(last - first + 1, 0, None)
    return first, count


def _box(grid):
    lo = np.asarray(grid.origin)
    return lo, lo + np.asarray(grid.voxel_pitch) * np.asarray(grid.values.shape)


def ray_march(v, origin, direction, step):
    """Samples (d_i, I_i) at d_i = (i + 1/2) step while inside the volume box."""
    if not step > 0:
        raise ValueError("step must be positive")
    lo, hi = _box(v)
    first, count = ray_sample_range(origin, direction, lo, hi, step)
    d = (first[0] + np.arange(count[0]) + 0.5) * step
    pts = np.asarray(origin, float) + d[:, None] * np.asarray(direction, float)
    vals = trilinear(v, pts) if len(d) else np.zeros(0)
    return d, np.asarray(vals).reshape(-1)


def soft_depth(d, I, beta=BETA, threshold=THRESHOLD_SYNTHETIC):
    """Softargmax depth, or None when the profile never reaches ``threshold``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    d = np.asarray(d, float)
    I = np.asarray(I, float)
    if I.size == 0 or I.max() < threshold:
        return None
    w = np.exp(beta * (I - I.max()))
    return float(np.sum(w * d) / np.sum(w))


@dataclass
class KeptSamples:
    """Discrete choices of one extraction pass: hit rays and surviving samples."""

    hit: torch.Tensor    # (S, R) bool
    ray: torch.Tensor    # (K,) flat ray index into S * R
    dist: torch.Tensor   # (K,) sample distance


def scan_rays(values, origin, pitch, box, x_s, dirs, step, beta, threshold, chunk_points=1 << 20):
    """No-grad pass locating hit rays and samples that carry softargmax weight.

    Samples lie inside the box by construction, so the edge-clamped
    interpolation of ``grid_sample`` reproduces :func:`trilinear_t` here.
    """
    S, R = len(x_s), len(dirs)
    o = np.repeat(np.asarray(x_s, float), R, axis=0)
    d = np.tile(np.asarray(dirs, float), (S, 1))
    first, count = ray_sample_range(o, d, box[0], box[1], step)
    hit = torch.zeros(S * R, dtype=torch.bool)
    rays, dists = [], []
    vol = torch.as_tensor(np.asarray(values, dtype=float))[None, None]
    span = torch.as_tensor(np.asarray(pitch, float) * np.asarray(values.shape))
    lo = torch.as_tensor(np.asarray(origin, float))
    live = np.nonzero(count > 0)[0]
    # rays with similar sample counts share a block, which keeps padding small
    live = live[np.argsort(count[live], kind="stable")]
    o_t, d_t = torch.as_tensor(o), torch.as_tensor(d)
    first_t, count_t = torch.as_tensor(first), torch.as_tensor(count)
    start = 0
    with torch.no_grad():
        while start < len(live):
            stop = start + 1
            # largest block whose padded size stays under chunk_points
            hi_n = min(len(live), start + chunk_points)
            stop = start + max(1, int(np.searchsorted(
                count[live[start:hi_n]] * np.arange(1, hi_n - start + 1), chunk_points)))
            sl = torch.as_tensor(live[start:stop])
            m = int(count_t[sl].max())
            j = torch.arange(m)
            valid = j[None, :] < count_t[sl, None]
            dist = (first_t[sl, None].double() + j[None, :] + 0.5) * step
            pts = o_t[sl, None, :] + dist[..., None] * d_t[sl, None, :]
            grid = (2 * (pts - lo) / span - 1).flip(-1)[None, None]
            I = F.grid_sample(vol, grid, mode="bilinear", padding_mode="border",
                              align_corners=False)[0, 0, 0]
            dense = torch.where(valid, I, -torch.inf)
            peak = dense.amax(dim=1)
            h = peak >= threshold
            hit[sl] = h
            keep = valid & h[:, None] & (beta * (I - peak[:, None]) >= -PRUNE)
            kr, ks = torch.nonzero(keep, as_tuple=True)
            rays.append(sl[kr])
            dists.append(dist[kr, ks])
            start = stop
    ray = torch.cat(rays) if rays else torch.zeros(0, dtype=torch.long)
    dist = torch.cat(dists) if dists else torch.zeros(0, dtype=torch.float64)
    # ray-major order so every run of samples is contiguous and sorted by distance
    order = np.lexsort((dist.numpy(), ray.numpy()))
    return KeptSamples(hit.reshape(S, R), ray[order], dist[order])


def soft_depth_t(values, origin, pitch, x_s, dirs, kept, beta):
    """Differentiable softargmax depth (S, R) over the kept samples; 0 on misses."""
    S, R = kept.hit.shape
    xs = torch.as_tensor(x_s, dtype=torch.float64)
    dv = torch.as_tensor(dirs, dtype=torch.float64)
    s_idx = kept.ray // R
    r_idx = kept.ray % R
    pts = xs[s_idx] + kept.dist[:, None] * dv[r_idx]
    I = trilinear_t(values, origin, pitch, pts)
    peak = torch.full((S * R,), -torch.inf, dtype=torch.float64)
    peak = peak.scatter_reduce(0, kept.ray, I.detach(), reduce="amax")
    w = torch.exp(beta * (I - peak[kept.ray]))
    num = torch.zeros(S * R, dtype=torch.float64).index_add(0, kept.ray, w * kept.dist)
    den = torch.zeros(S * R, dtype=torch.float64).index_add(0, kept.ray, w)
    hit = kept.hit.reshape(-1)
    depth = torch.where(hit, num / torch.where(hit, den, torch.ones_like(den)), torch.zeros_like(num))
    return depth.reshape(S, R)


def _cross(a, b):
    return torch.linalg.cross(a, b, dim=-1)


@dataclass
class NormalBranches:
    """Orientation flips and validity of every interior cell (held fixed in checks)."""

    s1: torch.Tensor
    s2: torch.Tensor
    ok: torch.Tensor


def normals_t(depth, hit, dirs, x_s, frozen=None):
    """Normals from the two triangles (N, E, S) and (S, W, N) around each cell.

    depth, hit: (S, n, n); dirs: (n, n, 3); x_s: (S, 3). Returns (normals,
    fallback, branches) where fallback cells carry the reversed ray direction.
    """
    S, n, _ = depth.shape
    dv = torch.as_tensor(dirs, dtype=torch.float64)
    xs = torch.as_tensor(x_s, dtype=torch.float64)
    P = xs[:, None, None, :] + depth[..., None] * dv[None]
    out = (-dv)[None].expand(S, n, n, 3)
    fallback = torch.ones(S, n, n, dtype=torch.bool)
    if n < 3:
        return out, fallback, None
    c = (slice(None), slice(1, -1), slice(1, -1))
    PN, PS = P[:, :-2, 1:-1], P[:, 2:, 1:-1]
    PE, PW = P[:, 1:-1, 2:], P[:, 1:-1, :-2]
    dc = dv[1:-1, 1:-1][None]
    n1 = _cross(PE - PN, PS - PN)
    n2 = _cross(PW - PS, PN - PS)
    if frozen is None:
        ok = hit[c] & hit[:, :-2, 1:-1] & hit[:, 2:, 1:-1] & hit[:, 1:-1, 2:] & hit[:, 1:-1, :-2]
        # face the wall: flip any triangle normal pointing along the ray
        s1 = torch.where((n1 * dc).sum(-1, keepdim=True).detach() > 0, -1.0, 1.0)
        s2 = torch.where((n2 * dc).sum(-1, keepdim=True).detach() > 0, -1.0, 1.0)
        nsum = (s1 * n1 + s2 * n2).detach()
        norm = torch.linalg.vector_norm(nsum, dim=-1)
        scale = (torch.linalg.vector_norm((PE - PW).detach(), dim=-1)
                 * torch.linalg.vector_norm((PN - PS).detach(), dim=-1))
        ok = ok & (scale > 0) & (norm > 1e-9 * scale)
        frozen = NormalBranches(s1, s2, ok)
    s1, s2, ok = frozen.s1, frozen.s2, frozen.ok
    nsum = s1 * n1 + s2 * n2
    norm = torch.linalg.vector_norm(nsum, dim=-1)
    safe = torch.where(ok, norm, torch.ones_like(norm))
    inner = torch.where(ok[..., None], nsum / safe[..., None], (-dc).expand_as(nsum))
    out = out.clone()
    out[c] = inner
    fallback = fallback.clone()
    fallback[c] = ~ok
    return out, fallback, frozen


def estimate_normals(depth_grid, dirs, x_s):
    """Normals for one sensor point; ``depth_grid`` uses NaN (or None) for misses."""
    dg = np.array(depth_grid, dtype=float)
    hit = np.isfinite(dg)
    with torch.no_grad():
        nrm, fb, _ = normals_t(torch.as_tensor(np.where(hit, dg, 0.0))[None],
                               torch.as_tensor(hit)[None], dirs, np.asarray(x_s, float)[None])
    return nrm[0].numpy(), fb[0].numpy()


def extract_surface(v, wall, cfg, beta=BETA, threshold=THRESHOLD_SYNTHETIC, sensor_idx=None):
    """Hemisphere rays -> ray march -> softargmax depth -> neighbour normals."""
    n = cfg.hemisphere_resolution
    dirs = hemisphere_grid(n, wall.wall_normal).dirs
    flat = dirs.reshape(-1, 3)
    idx = np.arange(wall.num_sensors) if sensor_idx is None else np.asarray(sensor_idx)
    x_s = wall.sensor_points[idx]
    origin, pitch = _grid_meta(v)
    vals = torch.as_tensor(v.values)
    kept = scan_rays(v.values, v.origin, v.voxel_pitch, _box(v), x_s, flat, cfg.ray_step,
                     beta, threshold)
    with torch.no_grad():
        depth = soft_depth_t(vals, origin, pitch, x_s, flat, kept, beta)
        depth = depth.reshape(len(idx), n, n)
        hit = kept.hit.reshape(len(idx), n, n)
        nrm, fb, _ = normals_t(depth, hit, dirs, x_s)
    depth = depth.numpy()
    x_g = x_s[:, None, None, :] + depth[..., None] * dirs[None]
    hit = hit.numpy()
    return ImplicitSurface(hit, depth, np.where(hit[..., None], x_g, 0.0), nrm.numpy(),
                           fb.numpy() | ~hit, dirs, x_s)


# --- point cloud export ----------------------------------------------------------

def export_pointcloud(G, rho, path):
    """ASCII PLY of hit cells: x y z nx ny nz albedo (9 significant digits) fallback.

    ``fallback`` is 1 where the normal is the reversed ray direction rather
    than an estimate, so consumers can leave those normals out.
    """
    mask = G.hit
    pts = G.x_g[mask]
    nrm = G.n_g[mask]
    fb = G.fallback[mask]
    alb = sample_albedo(rho, pts) if len(pts) else np.zeros(0)
    alb = np.atleast_1d(alb)
    lines = [
        "ply", "format ascii 1.0", "comment nloscal implicit surface",
        f"element vertex {len(pts)}",
        "property double x", "property double y", "property double z",
        "property double nx", "property double ny", "property double nz",
        "property double albedo", "property uchar fallback", "end_header",
    ]
    for p, q, a, f in zip(pts, nrm, alb, fb):
        lines.append(" ".join(f"{x:.9g}" for x in (*p, *q, a)) + f" {int(f)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(pts)


def read_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    count = next(int(l.split()[-1]) for l in lines[:end] if l.startswith("element vertex"))
    rows = [list(map(float, l.split())) for l in lines[end + 1:end + 1 + count]]
    props = sum(1 for l in lines[:end] if l.startswith("property"))
    return np.array(rows, dtype=float).reshape(count, props)
