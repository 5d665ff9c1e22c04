"""Small synthetic scenes with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .phasor import PhasorKernelParams
from .scene import SceneConfig, TriangleMesh, WallGrid, pitch_of, rectangle_mesh
from .sensor import LaserSensorParams

PICOSECOND = 1e-12


@dataclass
class PlaneScene:
    wall: WallGrid
    cfg: SceneConfig
    mesh: TriangleMesh
    depth: float
    normal: np.ndarray
    ls: LaserSensorParams
    pf: PhasorKernelParams
    albedo: float
    render_cfg: SceneConfig


def wall_pitch(wall):
    return pitch_of(wall.sensor_points[:, 0])[0]


def default_phasor(wall, cfg, cycles=2.0):
    return PhasorKernelParams.nyquist_default(wall_pitch(wall), cfg.c, cycles)


def plane_scene(wall_res=32, num_bins=512, bin_width=32 * PICOSECOND, depth=0.5,
                plane_size=0.6, albedo=0.5, volume_res=(32, 32, 32), hemisphere=32,
                render_hemisphere=64, ray_step=None, I_l=None, sigma_bins=2.0, kappa_bins=2.0,
                eta_s=0.0, cycles=1.0, subdivisions=4):
    """Confocal 1 x 1 m wall at z = 0 facing a square Lambertian plane at ``depth``.

    The hidden volume spans the wall laterally and [0.3, 0.7] m in depth so
    that its lateral pitch equals the wall pitch. The ground truth is rendered
    with a finer hemisphere grid (``render_hemisphere``) than the one used for
    extraction and re-rendering. ``I_l`` defaults to a value that puts the
    sensed peak near 1.
    """
    wall = WallGrid.planar((1.0, 1.0), (wall_res, wall_res))
    cfg = SceneConfig(bin_width=bin_width, num_bins=num_bins,
                      volume_origin=(-0.5, -0.5, 0.3), volume_extent=(1.0, 1.0, 0.4),
                      volume_resolution=volume_res, hemisphere_resolution=hemisphere,
                      ray_step=ray_step)
    mesh = rectangle_mesh((0.0, 0.0, depth), (plane_size, plane_size), normal=(0.0, 0.0, -1.0),
                          albedo=albedo, subdivisions=subdivisions)
    if I_l is None:
        I_l = plane_intensity_scale(depth, hemisphere, albedo, bin_width, sigma_bins, kappa_bins)
    ls = LaserSensorParams(I_l=I_l, sigma_ls=sigma_bins * bin_width,
                           kappa_s=1.0 / (kappa_bins * bin_width), eta_s=eta_s)
    render_cfg = replace(cfg, hemisphere_resolution=render_hemisphere)
    return PlaneScene(wall, cfg, mesh, depth, np.array([0.0, 0.0, -1.0]), ls,
                      default_phasor(wall, cfg, cycles), albedo, render_cfg)


def plane_intensity_scale(depth, n, albedo, bin_width, sigma_bins, kappa_bins):
    """Rough I_l putting the sensed peak near 1 for the head-on plane scene.

    The per-ray contribution near the zenith is albedo * w / depth^4 spread by
    the binning Gaussian and the sensor response; only the order of magnitude
    matters here.
    """
    per_ray = albedo * (2 * np.pi / n**2) / depth**4
    spread = np.sqrt(2 * np.pi) * np.hypot(0.62, sigma_bins) + kappa_bins
    return float(bin_width * spread / per_ray / 4.0)
