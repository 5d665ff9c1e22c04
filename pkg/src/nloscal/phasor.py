"""Phasor-field reconstruction: virtual illumination kernel, frequency-domain
filtering of transients and RSD backprojection into a voxel grid.

Two RSD evaluators are provided. ``rsd_direct`` sums every (voxel, wall point,
frequency) term explicitly and is only meant for small problems and as the
reference for ``rsd_fft``, which evaluates the same sum as per-depth 2-D
convolutions with zero-padded FFTs.

Sign convention: spectra come from the forward DFT (exp(-i w t)), so a
measurement delayed by the travel time d/c carries exp(-i w d/c); the
backpropagation kernel therefore uses exp(+i w d/c) / d.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.fft import next_fast_len

from .scene import pitch_of

BAND_THRESHOLD = 1e-3
DIRECT_MAX_WALL = 16 * 16
DIRECT_MAX_VOXELS = 32**3


class EmptyReconstruction(ValueError):
    pass


@dataclass(frozen=True)
class PhasorKernelParams:
    omega_pf: float
    sigma_pf: float

    def __post_init__(self):
        if not (self.omega_pf > 0 and self.sigma_pf > 0):
            raise ValueError("omega_pf and sigma_pf must be positive")

    def check_record(self, num_bins, bin_width):
        if 6 * self.sigma_pf > num_bins * bin_width:
            warnings.warn("phasor envelope (6 sigma) is longer than the temporal record",
                          RuntimeWarning, stacklevel=2)

    @classmethod
    def nyquist_default(cls, wall_pitch, c, cycles=2.0):
        """Wavelength twice the wall sampling pitch; envelope sigma of ``cycles`` periods."""
        wavelength = 2.0 * wall_pitch
        omega = 2 * math.pi * c / wavelength
        return cls(omega_pf=omega, sigma_pf=cycles * (2 * math.pi / omega))


@dataclass
class VolumeGrid:
    values: np.ndarray  # (W, H, D)
    origin: tuple
    voxel_pitch: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.origin = tuple(float(x) for x in self.origin)
        self.voxel_pitch = tuple(float(x) for x in self.voxel_pitch)
        if self.values.ndim != 3:
            raise ValueError("volume must be 3-D")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("volume values must be finite and non-negative")

    @classmethod
    def for_config(cls, values, cfg):
        values = np.asarray(values)
        if values.shape != cfg.volume_resolution:
            raise ValueError(f"volume shape {values.shape} != {cfg.volume_resolution}")
        return cls(values, cfg.volume_origin, cfg.voxel_pitch)

    def centers(self, axis):
        n = self.values.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.voxel_pitch[axis]


@dataclass
class SpectralCube:
    """Filtered phasors for a contiguous band of DFT bins.

    ``coeffs`` is (S, B) for confocal data or (L, S, B) otherwise.
    """

    coeffs: np.ndarray
    bins: np.ndarray
    omegas: np.ndarray
    num_bins: int = 0
    bin_width: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)
        self.omegas = np.asarray(self.omegas, dtype=float)
        if self.coeffs.shape[-1] != len(self.bins) or len(self.bins) != len(self.omegas):
            raise ValueError("coefficient count must equal the retained band size")
        if len(self.bins) > 1 and np.any(np.diff(self.bins) != 1):
            raise ValueError("retained band must be contiguous")

    @property
    def confocal(self):
        return self.coeffs.ndim == 2


# --- kernel and filtering -----------------------------------------------------

def kernel_times(num_bins, bin_width):
    return (np.arange(num_bins) - num_bins // 2) * bin_width


def phasor_kernel(p, t_grid):
    """exp(i w t) exp(-t^2 / 2 sigma^2) sampled on ``t_grid`` relative to its midpoint sample."""
    t = np.asarray(t_grid, dtype=float)
    t = t - t[len(t) // 2]
    return np.exp(1j * p.omega_pf * t) * np.exp(-t**2 / (2 * p.sigma_pf**2))


def kernel_spectrum_t(omega, sigma, num_bins, bin_width):
    """DFT of the midpoint-centered kernel, with the center rolled to index 0."""
    t = torch.as_tensor(kernel_times(num_bins, bin_width))
    samples = torch.exp(1j * omega * t) * torch.exp(-t**2 / (2 * sigma**2))
    return torch.fft.fft(torch.roll(samples, -(num_bins // 2)))


def select_band(magnitude, threshold=BAND_THRESHOLD):
    """Contiguous run of bins around the peak whose magnitude exceeds threshold * peak."""
    mag = np.asarray(magnitude)
    peak = int(np.argmax(mag))
    above = mag > threshold * mag[peak]
    lo = peak
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = peak
    while hi < len(mag) - 1 and above[hi + 1]:
        hi += 1
    return np.arange(lo, hi + 1)


def angular_frequencies(num_bins, bin_width):
    return 2 * math.pi * np.fft.fftfreq(num_bins, d=bin_width)


def filter_rows_t(rows, omega, sigma, bin_width, t0=0.0, band=None):
    """Filtered spectra (N, B) of real rows (N, T); returns (coeffs, band)."""
    T = rows.shape[-1]
    P = kernel_spectrum_t(omega, sigma, T, bin_width)
    if band is None:
        band = select_band(P.detach().abs().numpy())
    idx = torch.as_tensor(band)
    w = torch.as_tensor(angular_frequencies(T, bin_width)[band])
    Hf = torch.fft.fft(rows.to(torch.complex128), dim=-1)[..., idx]
    return Hf * (P[idx] * torch.exp(-1j * w * t0)), band


def filter_H(h, p):
    p.check_record(h.num_bins, h.bin_width)
    rows = torch.as_tensor(h.rows(), dtype=torch.float64)
    with torch.no_grad():
        coeffs, band = filter_rows_t(rows, p.omega_pf, p.sigma_pf, h.bin_width, h.t0)
    coeffs = coeffs.numpy().reshape(h.values.shape[:-1] + (len(band),))
    return SpectralCube(coeffs, band, angular_frequencies(h.num_bins, h.bin_width)[band],
                        h.num_bins, h.bin_width)


# --- RSD propagation ------------------------------------------------------------

def _voxel_points(cfg):
    xs, ys, zs = (cfg.voxel_centers(a) for a in range(3))
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def rsd_direct(hpf, wall, cfg, guard=True, chunk=4096):
    """Explicit RSD sum: |sum_w sum_s sum_l e^{i w (d_lv + d_vs)/c} / (d_lv d_vs) H_pf|^2."""
    n_vox = int(np.prod(cfg.volume_resolution))
    if guard and (wall.num_sensors > DIRECT_MAX_WALL or wall.num_lasers > DIRECT_MAX_WALL
                  or n_vox > DIRECT_MAX_VOXELS):
        raise ValueError("rsd_direct is limited to 16x16 walls and 32^3 volumes (pass guard=False)")
    vox = _voxel_points(cfg)
    sp = wall.sensor_points
    lp = wall.laser_points
    coeffs = np.asarray(hpf.coeffs)
    out = np.zeros(n_vox)
    for start in range(0, n_vox, chunk):
        v = vox[start:start + chunk]
        d_vs = np.linalg.norm(v[:, None, :] - sp[None], axis=-1)  # (V, S)
        if np.any(d_vs == 0):
            raise ValueError("voxel coincides with a wall point")
        if hpf.confocal:
            acc = np.zeros(len(v), dtype=complex)
            for b, w in enumerate(hpf.omegas):
                k = np.exp(1j * w * 2 * d_vs / cfg.c) / (d_vs * d_vs)
                acc += k @ coeffs[:, b]
        else:
            d_lv = np.linalg.norm(v[:, None, :] - lp[None], axis=-1)  # (V, L)
            if np.any(d_lv == 0):
                raise ValueError("voxel coincides with a wall point")
            acc = np.zeros(len(v), dtype=complex)
            for b, w in enumerate(hpf.omegas):
                kl = np.exp(1j * w * d_lv / cfg.c) / d_lv
                ks = np.exp(1j * w * d_vs / cfg.c) / d_vs
                acc += np.sum(ks * (kl @ coeffs[:, :, b]), axis=1)
        out[start:start + chunk] = np.abs(acc) ** 2
    return VolumeGrid.for_config(out.reshape(cfg.volume_resolution), cfg)


@dataclass
class _Lattice:
    x0: float
    y0: float
    px: float
    py: float
    nx: int
    ny: int
    z: float


def _wall_lattice(points, shape, normal):
    if abs(abs(normal[2]) - 1.0) > 1e-12:
        raise ValueError("FFT propagation needs a wall parallel to the volume depth planes (normal along z)")
    if np.ptp(points[:, 2]) > 1e-9:
        raise ValueError("wall points are not planar")
    nx, ny = shape
    px, ux = pitch_of(points[:, 0])
    py, uy = pitch_of(points[:, 1])
    if len(ux) != nx or len(uy) != ny:
        raise ValueError("wall grid shape does not match its points")
    lat = _Lattice(float(ux[0]), float(uy[0]), px, py, nx, ny, float(points[0, 2]))
    gx, gy = np.meshgrid(ux, uy, indexing="ij")
    if not (np.allclose(gx.ravel(), points[:, 0], atol=1e-9) and np.allclose(gy.ravel(), points[:, 1], atol=1e-9)):
        raise ValueError("wall points are not in row-major lattice order")
    return lat


class RSDPlan:
    """Cached FFT propagation kernels for one (wall, volume) geometry.

    Kernels depend only on geometry and frequency, never on the optimized
    parameters, so they are built once per DFT bin and reused.
    """

    def __init__(self, wall, cfg, depth_chunk=8):
        self.wall, self.cfg = wall, cfg
        self.confocal = wall.confocal
        pts = wall.sensor_points if wall.confocal else wall.laser_points
        shape = wall.sensor_shape if wall.confocal else wall.laser_shape
        self.lat = _wall_lattice(pts, shape, wall.wall_normal)
        vp = cfg.voxel_pitch
        for axis, p, n in ((0, self.lat.px, self.lat.nx), (1, self.lat.py, self.lat.ny)):
            if n > 1 and abs(vp[axis] - p) > 1e-9 * p:
                raise ValueError("volume lateral pitch must match the wall sampling pitch")
        self.vx, self.vy, self.vd = cfg.volume_resolution
        self.Px = next_fast_len(self.lat.nx + self.vx - 1)
        self.Py = next_fast_len(self.lat.ny + self.vy - 1)
        xv0 = cfg.voxel_centers(0)[0]
        yv0 = cfg.voxel_centers(1)[0]
        px = vp[0] if self.lat.nx == 1 or np.isnan(self.lat.px) else self.lat.px
        py = vp[1] if self.lat.ny == 1 or np.isnan(self.lat.py) else self.lat.py
        di = np.arange(-(self.lat.nx - 1), self.vx)
        dj = np.arange(-(self.lat.ny - 1), self.vy)
        self.dx = (xv0 - self.lat.x0) + di * px
        self.dy = (yv0 - self.lat.y0) + dj * py
        self.dz = cfg.voxel_centers(2) - self.lat.z
        if np.any(np.abs(self.dz) == 0):
            raise ValueError("voxel coincides with a wall point")
        self.depth_chunk = depth_chunk
        self._cache = {}
        if not wall.confocal:
            vox = _voxel_points(cfg).reshape(self.vx, self.vy, self.vd, 3)
            self._sensor_d = np.linalg.norm(vox[..., None, :] - wall.sensor_points, axis=-1)

    def kernel_fft(self, omega):
        key = float(omega)
        if key not in self._cache:
            r = np.sqrt(self.dx[None, :, None] ** 2 + self.dy[None, None, :] ** 2
                        + self.dz[:, None, None] ** 2)
            if self.confocal:
                g = np.exp(1j * omega * 2 * r / self.cfg.c) / (r * r)
            else:
                g = np.exp(1j * omega * r / self.cfg.c) / r
            self._cache[key] = torch.fft.fft2(torch.as_tensor(g), s=(self.Px, self.Py))
        return self._cache[key]

    def sensor_kernel(self, omega):
        d = self._sensor_d
        return torch.as_tensor(np.exp(1j * omega * d / self.cfg.c) / d)

    def propagate_t(self, coeffs, omegas):
        """|U|^2 over the voxel grid for coefficient tensor (S, B) or (L, S, B)."""
        lat = self.lat
        ox, oy = lat.nx - 1, lat.ny - 1
        U = torch.zeros(self.vd, self.vx, self.vy, dtype=torch.complex128)
        if self.confocal:
            img = coeffs.reshape(lat.nx, lat.ny, -1).permute(2, 0, 1)
            F = torch.fft.fft2(img, s=(self.Px, self.Py))
            # the inverse FFT is linear, so sum over frequency first
            acc = torch.zeros(self.vd, self.Px, self.Py, dtype=torch.complex128)
            for b, w in enumerate(omegas):
                acc = acc + F[b][None] * self.kernel_fft(w)
            U = torch.fft.ifft2(acc)[:, ox:ox + self.vx, oy:oy + self.vy]
        else:
            n_s = coeffs.shape[1]
            img = coeffs.reshape(lat.nx, lat.ny, n_s, -1).permute(3, 2, 0, 1)  # (B, S, nx, ny)
            F = torch.fft.fft2(img, s=(self.Px, self.Py))
            for b, w in enumerate(omegas):
                G = self.kernel_fft(w)  # (D, Px, Py)
                ks = self.sensor_kernel(w)  # (vx, vy, vd, S)
                for z in range(self.vd):
                    field_ = torch.fft.ifft2(F[b] * G[z][None])[:, ox:ox + self.vx, oy:oy + self.vy]
                    U[z] = U[z] + torch.einsum("sxy,xys->xy", field_, ks[:, :, z, :])
        return (U.real**2 + U.imag**2).permute(1, 2, 0)


def rsd_fft(hpf, wall, cfg, plan=None):
    plan = plan or RSDPlan(wall, cfg)
    with torch.no_grad():
        vol = plan.propagate_t(torch.as_tensor(hpf.coeffs), hpf.omegas)
    return VolumeGrid.for_config(vol.numpy(), cfg)


def max_project_xz(v):
    vals = v.values if isinstance(v, VolumeGrid) else np.asarray(v)
    return vals.max(axis=1)


def normalize_volume(v):
    """Divide by the maximum and round to float32, the precision volumes are stored at.

    The rounding makes the result independent of the input scale: rescaling H
    only perturbs v / max at the 1e-15 level, far below float32 resolution.
    """
    m = float(np.max(v.values))
    if not m > 0:
        raise EmptyReconstruction("empty reconstruction")
    vals = (v.values / m).astype(np.float32).astype(np.float64)
    return VolumeGrid(vals, v.origin, v.voxel_pitch)


def reconstruct(h, p, wall, cfg, oracle=False, plan=None):
    """filter_H -> RSD -> normalize; returns (raw, normalized) volumes."""
    hpf = filter_H(h, p)
    raw = rsd_direct(hpf, wall, cfg) if oracle else rsd_fft(hpf, wall, cfg, plan)
    return raw, normalize_volume(raw)


# --- files -------------------------------------------------------------------

def write_volume(path, v, **extra):
    """Raw float32 little-endian values in (x, y, z) C order plus a JSON sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(v.values, dtype="<f4").tobytes())
    meta = {"dims": list(v.values.shape), "origin": list(v.origin),
            "voxel_pitch": list(v.voxel_pitch), "dtype": "float32 little-endian",
            "order": "x, y, z (C order)"}
    meta.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_volume(path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    dims = tuple(meta["dims"])
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: size does not match sidecar dims {dims}")
    return VolumeGrid(data.astype(np.float64).reshape(dims), meta["origin"], meta["voxel_pitch"])
