"""PNG exports and report figures."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CLIP_PERCENT = 1.0
# no timestamps or version strings, so reruns produce identical files
_PNG_META = {"Software": None}


def tone_map(img, clip=CLIP_PERCENT):
    """Linear grayscale map to uint8 with a symmetric percentile clip."""
    a = np.asarray(img, dtype=float)
    lo, hi = np.percentile(a, [clip, 100 - clip]) if a.size else (0.0, 0.0)
    if not hi > lo:
        hi = lo + 1.0
    return np.round(np.clip((a - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def save_gray(path, img, clip=CLIP_PERCENT):
    """Array of shape (rows, cols) -> PNG of the same pixel dimensions."""
    plt.imsave(path, tone_map(img, clip), cmap="gray", vmin=0, vmax=255, format="png",
               metadata=_PNG_META)


def save_rgb(path, rgb):
    plt.imsave(path, np.clip(np.asarray(rgb, float), 0, 1), format="png", metadata=_PNG_META)


def save_volume_projections(prefix, values):
    """Maximum-intensity projections: xz (max over y) and xy (max over z)."""
    paths = {"xz": f"{prefix}_xz.png", "xy": f"{prefix}_xy.png"}
    save_gray(paths["xz"], values.max(axis=1))
    save_gray(paths["xy"], values.max(axis=2))
    return paths


def surface_maps(G, sensor):
    """Depth and normal images of one sensor's concentric grid (misses black)."""
    hit = G.hit[sensor]
    depth = np.where(hit, G.depth[sensor], 0.0)
    rgb = np.where(hit[..., None], 0.5 * (G.n_g[sensor] + 1.0), 0.0)
    return depth, rgb


def save_surface_maps(prefix, G, sensor=None):
    if sensor is None:
        sensor = len(G.hit) // 2
    depth, rgb = surface_maps(G, sensor)
    paths = {"depth": f"{prefix}_depth.png", "normals": f"{prefix}_normals.png"}
    save_gray(paths["depth"], depth, clip=0.0)
    save_rgb(paths["normals"], rgb)
    return paths


def _figure_save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def convergence_figure(path, rows, truth=None):
    """Loss terms (log scale) and the six scalars relative to their first value."""
    it = np.array([r["iteration"] for r in rows])
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "e_h", "e_ipf", "e_rho"):
        vals = np.array([r[key] for r in rows])
        if np.any(vals > 0):
            ax0.semilogy(it, np.where(vals > 0, vals, np.nan), label=key)
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("loss")
    ax0.legend()
    for key in ("omega_pf", "sigma_pf", "I_l", "sigma_ls", "kappa_s", "eta_s"):
        vals = np.array([r[key] for r in rows])
        ref = (truth or {}).get(key) or (vals[0] if vals[0] != 0 else 1.0)
        if key == "eta_s":
            ax1.plot(it, vals, label="eta_s (abs)")
        else:
            ax1.plot(it, vals / ref, label=key)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("value / reference")
    ax1.legend(fontsize=8)
    fig.tight_layout()
    _figure_save(fig, path)


def noise_figure(path, scales, snrs, extra=None, extra_label=None):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogx(scales, snrs, "o-")
    ax.set_xlabel("photon scale")
    ax.set_ylabel("SNR (dB)")
    if extra is not None:
        ax2 = ax.twinx()
        ax2.semilogx(scales, extra, "s--", color="tab:red")
        ax2.set_ylabel(extra_label or "")
    fig.tight_layout()
    _figure_save(fig, path)
