"""Joint laser-sensor response, intensity offset and Poisson noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F



@dataclass(frozen=True)
class LaserSensorParams:
    """I_l (intensity), sigma_ls (s), kappa_s (1/s) and offset eta_s.

    The sensor jitter offset is fixed at zero and is not a parameter.
    """

    I_l: float
    sigma_ls: float
    kappa_s: float
    eta_s: float = 0.0

    def __post_init__(self):
        if not (self.I_l > 0 and self.sigma_ls > 0 and self.kappa_s > 0):
            raise ValueError("I_l, sigma_ls and kappa_s must be positive")
        if self.eta_s < 0:
            raise ValueError("eta_s must be non-negative")

    mu_s = 0.0


def _ceil_bins(x):
    # tolerate round-off such as 20.000000000000004
    return math.ceil(round(x, 9))


def min_support_bins(sigma_ls, kappa_s, bin_width):
    return _ceil_bins((4 * sigma_ls + 6 / kappa_s) / bin_width)


def default_support_bins(sigma_ls, kappa_s, bin_width):
    # wider than the minimum so truncated tail mass stays below 1e-5
    return _ceil_bins((6 * sigma_ls + 12 / kappa_s) / bin_width)


def psi_kernel_t(I_l, sigma_ls, kappa_s, bin_width, support_bins):
    """Exponentially modified Gaussian sampled at bin offsets -K..K (torch, differentiable).

    Closed form of the Gaussian (sigma_ls) convolved with kappa_s exp(-kappa_s t),
    t >= 0. Where erfc would overflow against the exponential the scaled
    complementary error function is used instead, so very fast decays
    (kappa_s * sigma_ls >> 1) reduce cleanly to the Gaussian. The continuous
    kernel integrates to I_l.
    """
    K = int(support_bins)
    t = torch.arange(-K, K + 1, dtype=torch.float64) * bin_width
    root2s = math.sqrt(2.0) * sigma_ls
    x = (kappa_s * sigma_ls**2 - t) / root2s
    # x >= 0: exp(k^2 s^2 / 2 - k t) erfc(x) == exp(-t^2 / 2 s^2) erfcx(x)
    left = torch.exp(-t**2 / (2 * sigma_ls**2)) * torch.special.erfcx(torch.clamp(x, min=0.0))
    xr = torch.clamp(x, max=0.0)
    tr = kappa_s * sigma_ls**2 - root2s * xr
    right = torch.exp(0.5 * (kappa_s * sigma_ls) ** 2 - kappa_s * tr) * torch.erfc(xr)
    return 0.5 * I_l * kappa_s * torch.where(x >= 0, left, right)


def psi_kernel(p, bin_width, support_bins=None):
    if support_bins is None:
        support_bins = default_support_bins(p.sigma_ls, p.kappa_s, bin_width)
    if support_bins < min_support_bins(p.sigma_ls, p.kappa_s, bin_width):
        raise ValueError("support too short for the requested sigma_ls / kappa_s")
    with torch.no_grad():
        k = psi_kernel_t(torch.tensor(p.I_l, dtype=torch.float64),
                         torch.tensor(p.sigma_ls, dtype=torch.float64),
                         torch.tensor(p.kappa_s, dtype=torch.float64),
                         bin_width, support_bins)
    return k.numpy()


def convolve_rows_t(rows, kernel):
    """Zero-padded 'same' convolution of every row with a centered odd kernel."""
    K = (kernel.shape[0] - 1) // 2
    out = F.conv1d(rows[:, None, :], kernel.flip(0)[None, None, :], padding=K)
    return out[:, 0, :]


def apply_sensor_t(rows, kernel, eta_s):
    return convolve_rows_t(rows, kernel) + eta_s


def apply_sensor(h, p, support_bins=None):
    """H_R = psi * H_r + eta_s along time for every (l, s) row."""
    kernel = torch.as_tensor(psi_kernel(p, h.bin_width, support_bins))
    rows = torch.as_tensor(h.rows(), dtype=torch.float64)
    with torch.no_grad():
        out = apply_sensor_t(rows, kernel, p.eta_s)
    return h.with_values(out.numpy().reshape(h.values.shape))


def add_poisson_noise(h, photon_scale, seed):
    """Replace each bin v by Poisson(v * photon_scale) / photon_scale.

    Each (l, s) row draws from its own Philox stream keyed by (seed, l, s), so
    any bin's sample depends only on (seed, l, s, t).
    """
    if not photon_scale > 0:
        raise ValueError("photon_scale must be positive")
    if np.any(h.values < 0):
        raise ValueError("Poisson noise needs non-negative intensities")
    vals = h.values.reshape(-1, h.num_sensors, h.num_bins)
    out = np.empty_like(vals)
    for l in range(vals.shape[0]):
        for s in range(vals.shape[1]):
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), l, s])))
            out[l, s] = rng.poisson(vals[l, s] * photon_scale) / photon_scale
    return h.with_values(out.reshape(h.values.shape))


def photon_scale_for_snr(clean, snr_db_target):
    """Photon scale whose expected Poisson noise gives the requested SNR."""
    v = clean.values
    return float(v.sum() / (np.sum(v**2) * 10 ** (-snr_db_target / 10)))


def snr_db(clean, noisy):
    if clean.values.shape != noisy.values.shape:
        raise ValueError("cubes differ in shape")
    err = np.sum((clean.values - noisy.values) ** 2)
    if err == 0:
        return math.inf
    return 10 * math.log10(np.sum(clean.values**2) / err)
