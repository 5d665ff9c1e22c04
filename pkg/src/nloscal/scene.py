"""Experiment geometry: relay wall grids, hidden-volume description, concentric
hemisphere sampling and triangle meshes used as synthetic ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
OCCLUSION_EPS = 1e-6


def local_frame(normal):
    """Orthonormal basis (t1, t2, n) around ``normal``.

    The first tangent is built from the coordinate axis along which the
    normal has its smallest component, so the frame is reproducible.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    t1 = axis - axis.dot(n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2, n


def concentric_square_to_disk(u, v):
    """Shirley-Chiu equal-area map from [-1, 1]^2 to the unit disk (vectorized)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u, v = np.broadcast_arrays(u, v)
    r = np.where(np.abs(u) > np.abs(v), u, v)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        phi = np.where(
            np.abs(u) > np.abs(v),
            (np.pi / 4.0) * (v / u),
            np.pi / 2.0 - (np.pi / 4.0) * (u / v),
        )
    origin = (u == 0) & (v == 0)
    phi = np.where(origin, 0.0, phi)
    r = np.where(origin, 0.0, r)
    return r * np.cos(phi), r * np.sin(phi)


def concentric_to_hemisphere(u, v, wall_normal=(0.0, 0.0, 1.0)):
    """Lift the concentric disk sample (u, v) to a unit direction about ``wall_normal``.

    Works on scalars or arrays; the last axis of the result holds xyz.
    """
    x, y = concentric_square_to_disk(u, v)
    z = np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))
    t1, t2, n = local_frame(wall_normal)
    d = x[..., None] * t1 + y[..., None] * t2 + z[..., None] * n
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def hemisphere_cell_centers(n):
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


@dataclass(frozen=True)
class HemisphereGrid:
    """n x n lattice of directions; ``dirs[i, j]`` samples u = c[i], v = c[j]."""

    n: int
    dirs: np.ndarray  # (n, n, 3)

    def neighbor(self, i, j, which):
        di, dj = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}[which]
        ii, jj = i + di, j + dj
        if 0 <= ii < self.n and 0 <= jj < self.n:
            return ii, jj
        return None

    @property
    def flat(self):
        return self.dirs.reshape(-1, 3)


def hemisphere_grid(n, wall_normal=(0.0, 0.0, 1.0)):
    if n < 3:
        raise ValueError(f"hemisphere resolution must be >= 3, got {n}")
    c = hemisphere_cell_centers(n)
    uu, vv = np.meshgrid(c, c, indexing="ij")
    return HemisphereGrid(n=n, dirs=concentric_to_hemisphere(uu, vv, wall_normal))


@dataclass(frozen=True)
class WallGrid:
    laser_points: np.ndarray
    sensor_points: np.ndarray
    wall_normal: np.ndarray
    confocal: bool
    sensor_shape: tuple = None
    laser_shape: tuple = None

    def __post_init__(self):
        lp = np.asarray(self.laser_points, dtype=float).reshape(-1, 3)
        sp = np.asarray(self.sensor_points, dtype=float).reshape(-1, 3)
        nrm = np.asarray(self.wall_normal, dtype=float)
        nrm = nrm / np.linalg.norm(nrm)
        object.__setattr__(self, "laser_points", lp)
        object.__setattr__(self, "sensor_points", sp)
        object.__setattr__(self, "wall_normal", nrm)
        sshape = tuple(self.sensor_shape) if self.sensor_shape is not None else (len(sp), 1)
        lshape = tuple(self.laser_shape) if self.laser_shape is not None else (len(lp), 1)
        object.__setattr__(self, "sensor_shape", sshape)
        object.__setattr__(self, "laser_shape", lshape)
        if sshape[0] * sshape[1] != len(sp):
            raise ValueError("sensor_shape does not match the number of sensor points")
        if lshape[0] * lshape[1] != len(lp):
            raise ValueError("laser_shape does not match the number of laser points")
        pts = np.vstack([lp, sp])
        offsets = (pts - sp[0]) @ nrm
        if np.max(np.abs(offsets)) >= 1e-9:
            raise ValueError("wall points are not coplanar with the wall normal")
        if self.confocal and (lp.shape != sp.shape or np.any(lp != sp)):
            raise ValueError("confocal wall requires identical laser and sensor points")

    @classmethod
    def planar(cls, extent, shape, center=(0.0, 0.0, 0.0), confocal=True,
               laser_shape=None, laser_extent=None):
        """Regular grid in the z = center[2] plane, normal +z, cell-centered samples.

        Points are ordered row-major: index = ix * ny + iy.
        """
        sensors = _planar_points(extent, shape, center)
        if confocal:
            lasers, lshape = sensors, tuple(shape)
        else:
            lshape = tuple(laser_shape or shape)
            lasers = _planar_points(laser_extent or extent, lshape, center)
        return cls(lasers, sensors, (0.0, 0.0, 1.0), confocal,
                   sensor_shape=tuple(shape), laser_shape=lshape)

    @property
    def num_lasers(self):
        return len(self.laser_points)

    @property
    def num_sensors(self):
        return len(self.sensor_points)


def _planar_points(extent, shape, center):
    nx, ny = shape
    cx, cy, cz = center
    xs = cx - extent[0] / 2 + (np.arange(nx) + 0.5) * extent[0] / nx
    ys = cy - extent[1] / 2 + (np.arange(ny) + 0.5) * extent[1] / ny
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.full(nx * ny, float(cz))], axis=1)


@dataclass(frozen=True)
class SceneConfig:
    bin_width: float
    num_bins: int
    volume_origin: tuple
    volume_extent: tuple
    volume_resolution: tuple
    hemisphere_resolution: int = 16
    ray_step: float = None
    c: float = SPEED_OF_LIGHT
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "volume_origin", tuple(float(x) for x in self.volume_origin))
        object.__setattr__(self, "volume_extent", tuple(float(x) for x in self.volume_extent))
        object.__setattr__(self, "volume_resolution", tuple(int(x) for x in self.volume_resolution))
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if min(self.volume_extent) <= 0:
            raise ValueError("volume_extent must be positive along every axis")
        if min(self.volume_resolution) < 1:
            raise ValueError("volume_resolution must be >= 1 along every axis")
        if self.hemisphere_resolution < 3:
            raise ValueError("hemisphere_resolution must be >= 3")
        if self.ray_step is None:
            object.__setattr__(self, "ray_step", 0.5 * min(self.voxel_pitch))
        if not self.ray_step > 0:
            raise ValueError("ray_step must be positive")
        if not self.c > 0:
            raise ValueError("speed of light must be positive")

    @property
    def voxel_pitch(self):
        return tuple(e / r for e, r in zip(self.volume_extent, self.volume_resolution))

    def voxel_centers(self, axis):
        o, p, n = self.volume_origin[axis], self.voxel_pitch[axis], self.volume_resolution[axis]
        return o + (np.arange(n) + 0.5) * p

    @property
    def bin_times(self):
        return self.t0 + np.arange(self.num_bins) * self.bin_width


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    albedo: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        a = np.ones(len(f)) if self.albedo is None else np.asarray(self.albedo, dtype=float).reshape(-1)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "albedo", a)
        if len(a) != len(f):
            raise ValueError("need one albedo value per triangle")
        if np.any((a < 0) | (a > 1)):
            raise ValueError("albedo must lie in [0, 1]")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if len(f) and np.any(self.areas <= 0):
            raise ValueError("mesh contains degenerate triangles")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0))

    @property
    def corners(self):
        return self.vertices[self.triangles]  # (F, 3, 3)

    @property
    def areas(self):
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def face_normals(self):
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def scaled_albedo(self, factor):
        return TriangleMesh(self.vertices, self.triangles, self.albedo * factor)

    def merged(self, other):
        return TriangleMesh(
            np.vstack([self.vertices, other.vertices]),
            np.vstack([self.triangles, other.triangles + len(self.vertices)]),
            np.concatenate([self.albedo, other.albedo]),
        )


def rectangle_mesh(center, size, normal=(0.0, 0.0, -1.0), albedo=1.0, subdivisions=1):
    """Planar rectangle split into 2 * subdivisions^2 triangles."""
    t1, t2, n = local_frame(normal)
    center = np.asarray(center, dtype=float)
    k = subdivisions
    a = np.linspace(-size[0] / 2, size[0] / 2, k + 1)
    b = np.linspace(-size[1] / 2, size[1] / 2, k + 1)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    verts = center + aa.ravel()[:, None] * t1 + bb.ravel()[:, None] * t2
    tris = []
    for i in range(k):
        for j in range(k):
            p0 = i * (k + 1) + j
            p1, p2, p3 = p0 + (k + 1), p0 + (k + 1) + 1, p0 + 1
            tris += [(p0, p1, p2), (p0, p2, p3)]
    tris = np.array(tris)
    return TriangleMesh(verts, tris, np.full(len(tris), float(albedo)))


def intersect_rays(mesh, origins, dirs, t_min=1e-9, chunk=1 << 20):
    """Nearest Moller-Trumbore hit per ray.

    Returns (t, face) with t = inf and face = -1 where nothing is hit.
    ``dirs`` need not be normalized; t is in units of ``dirs``.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n_rays = len(dirs)
    best_t = np.full(n_rays, np.inf)
    best_f = np.full(n_rays, -1, dtype=np.int64)
    if len(mesh.triangles) == 0 or n_rays == 0:
        return best_t, best_f
    c = mesh.corners
    v0, e1, e2 = c[:, 0], c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
    n_faces = len(v0)
    step = max(1, chunk // n_faces)
    for start in range(0, n_rays, step):
        sl = slice(start, start + step)
        o, d = origins[sl, None, :], dirs[sl, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rfk,fk->rf", p, e1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o - v0[None]
        u = np.einsum("rfk,rfk->rf", s, p) * inv
        q = np.cross(s, e1[None])
        v = np.einsum("rfk,rk->rf", q, d[:, 0]) * inv
        t = np.einsum("rfk,fk->rf", q, e2) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)
        t = np.where(hit, t, np.inf)
        f = np.argmin(t, axis=1)
        tt = t[np.arange(len(f)), f]
        best_t[sl] = tt
        best_f[sl] = np.where(np.isfinite(tt), f, -1)
    return best_t, best_f


def segments_occluded(mesh, a, b, eps=OCCLUSION_EPS, chunk=1 << 20):
    """Vectorized ray_occluded over segment arrays a[i] -> b[i]."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    out = np.zeros(len(a), dtype=bool)
    if len(mesh.triangles) == 0 or len(a) == 0:
        return out
    c = mesh.corners
    v0, e1, e2 = c[:, 0], c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
    step = max(1, chunk // len(v0))
    for start in range(0, len(a), step):
        sl = slice(start, start + step)
        o, d = a[sl, None, :], (b[sl] - a[sl])[:, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rfk,fk->rf", p, e1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o - v0[None]
        u = np.einsum("rfk,rfk->rf", s, p) * inv
        q = np.cross(s, e1[None])
        v = np.einsum("rfk,rk->rf", q, d[:, 0]) * inv
        t = np.einsum("rfk,fk->rf", q, e2) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps) & (t < 1 - eps)
        out[sl] = hit.any(axis=1)
    return out


def ray_occluded(mesh, a, b):
    """True iff some triangle cuts the open segment (a, b), endpoints trimmed by 1e-6."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        raise ValueError("segment endpoints coincide")
    return bool(segments_occluded(mesh, a[None], b[None])[0])


# --- file formats -----------------------------------------------------------

def read_obj(path, albedo_path=None):
    """Triangulated OBJ subset (``v`` and ``f`` records) plus optional albedo JSON.

    The sidecar is ``{"albedo": [...]}`` with one value per face, or a single
    number applied to every face.
    """
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}:{lineno}: only triangles are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    albedo = None
    if albedo_path is not None:
        spec = json.loads(Path(albedo_path).read_text())["albedo"]
        albedo = np.full(len(faces), float(spec)) if np.isscalar(spec) else np.asarray(spec, float)
    return TriangleMesh(np.array(verts, float).reshape(-1, 3),
                        np.array(faces, np.int64).reshape(-1, 3), albedo)


def write_obj(mesh, path, albedo_path=None):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {:.17g} {:.17g} {:.17g}\n".format(*v))
        for f in mesh.triangles:
            fh.write("f {} {} {}\n".format(*(f + 1)))
    if albedo_path is not None:
        Path(albedo_path).write_text(json.dumps({"albedo": mesh.albedo.tolist()}))


CONFIG_KEYS = {
    "wall_center": 3, "wall_extent": 2, "wall_resolution": 2, "confocal": 1,
    "laser_extent": 2, "laser_resolution": 2,
    "bin_width": 1, "num_bins": 1, "c": 1, "t0": 1,
    "volume_origin": 3, "volume_extent": 3, "volume_resolution": 3,
    "hemisphere_resolution": 1, "ray_step": 1,
}


def parse_config_text(text):
    """``key = value`` lines, ``#`` comments; vectors are whitespace separated."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        toks = value.split()
        if len(toks) != CONFIG_KEYS[key]:
            raise ValueError(f"line {lineno}: {key} expects {CONFIG_KEYS[key]} value(s)")
        out[key] = toks
    return out


def _as_bool(tok):
    if tok.lower() in ("1", "true", "yes", "on"):
        return True
    if tok.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {tok!r}")


_REQUIRED = object()


def config_from_mapping(kv):
    """Build (SceneConfig, WallGrid) from parsed (string-token) or typed values."""
    def get(key, conv, default=_REQUIRED):
        if key not in kv:
            if default is _REQUIRED:
                raise ValueError(f"missing config key {key!r}")
            return default
        val = kv[key]
        toks = val if isinstance(val, (list, tuple)) else [val]
        res = [conv(t) for t in toks]
        return res[0] if CONFIG_KEYS[key] == 1 else tuple(res)

    confocal = get("confocal", lambda t: t if isinstance(t, bool) else _as_bool(str(t)), True)
    wall = WallGrid.planar(
        extent=get("wall_extent", float),
        shape=get("wall_resolution", int),
        center=get("wall_center", float, (0.0, 0.0, 0.0)),
        confocal=confocal,
        laser_shape=None if confocal else get("laser_resolution", int),
        laser_extent=None if confocal else get("laser_extent", float, get("wall_extent", float)),
    )
    cfg = SceneConfig(
        bin_width=get("bin_width", float),
        num_bins=get("num_bins", int),
        volume_origin=get("volume_origin", float),
        volume_extent=get("volume_extent", float),
        volume_resolution=get("volume_resolution", int),
        hemisphere_resolution=get("hemisphere_resolution", int, 16),
        ray_step=get("ray_step", float, None),
        c=get("c", float, SPEED_OF_LIGHT),
        t0=get("t0", float, 0.0),
    )
    return cfg, wall


def load_config(path, overrides=None):
    kv = parse_config_text(Path(path).read_text())
    if overrides:
        for k, v in overrides.items():
            if v is None:
                continue
            if k not in CONFIG_KEYS:
                raise ValueError(f"unknown config key {k!r}")
            kv[k] = [str(x) for x in v] if isinstance(v, (list, tuple)) else [str(v)]
    return config_from_mapping(kv)


def format_config(cfg, wall_extent, wall_resolution, confocal=True, wall_center=(0, 0, 0),
                  laser_extent=None, laser_resolution=None):
    lines = [
        "# nloscal scene config (SI units)",
        "wall_center = {} {} {}".format(*wall_center),
        "wall_extent = {} {}".format(*wall_extent),
        "wall_resolution = {} {}".format(*wall_resolution),
        f"confocal = {'true' if confocal else 'false'}",
    ]
    if not confocal:
        lines += ["laser_extent = {} {}".format(*(laser_extent or wall_extent)),
                  "laser_resolution = {} {}".format(*laser_resolution)]
    lines += [
        f"bin_width = {cfg.bin_width!r}",
        f"num_bins = {cfg.num_bins}",
        f"c = {cfg.c!r}",
        f"t0 = {cfg.t0!r}",
        "volume_origin = {!r} {!r} {!r}".format(*cfg.volume_origin),
        "volume_extent = {!r} {!r} {!r}".format(*cfg.volume_extent),
        "volume_resolution = {} {} {}".format(*cfg.volume_resolution),
        f"hemisphere_resolution = {cfg.hemisphere_resolution}",
        f"ray_step = {cfg.ray_step!r}",
    ]
    return "\n".join(lines) + "\n"


def pitch_of(points_1d):
    """Spacing of a sorted regular 1-D lattice (raises if irregular)."""
    u = np.unique(np.round(points_1d, 12))
    if len(u) == 1:
        return math.nan, u
    d = np.diff(u)
    if np.max(np.abs(d - d.mean())) > 1e-9 * max(1.0, abs(d.mean())):
        raise ValueError("wall grid is not regular")
    return float(d.mean()), u
