"""Self-calibration of the imaging parameters by gradient descent on the transient loss.

The forward pipeline (filter -> RSD -> normalize -> ray-march softargmax ->
normals -> implicit render -> sensor response) is written with torch tensors
so reverse-mode autodiff gives the exact gradient of the loss with respect to
every scalar parameter and every albedo voxel. Discrete choices (frequency
band, hit mask and kept samples, normal orientation, splat bins, kernel
support, volume argmax) are recorded in :class:`Branches` and can be replayed
so finite differences see the same smooth branch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .phasor import EmptyReconstruction, PhasorKernelParams, RSDPlan, VolumeGrid, filter_rows_t, \
    angular_frequencies
from .scene import hemisphere_grid
from .sensor import LaserSensorParams, apply_sensor_t, default_support_bins, psi_kernel_t
from .surface import BETA, THRESHOLD_SYNTHETIC, AlbedoGrid, ImplicitSurface, KeptSamples, \
    NormalBranches, normals_t, sample_albedo_t, scan_rays, soft_depth_t
from .transient import SplatBins, check_cube_matches, render_surface_t

SCALARS = ("omega_pf", "sigma_pf", "I_l", "sigma_ls", "kappa_s", "eta_s")
GROUPS = {"pf": (0, 1), "ls": (2, 3, 4, 5), "albedo": ()}
LAMBDA1 = 1e2
LAMBDA2 = 5e-3
HISTORY_FIELDS = ("iteration",) + SCALARS + ("e_h", "e_ipf", "e_rho", "total")


class NumericalError(RuntimeError):
    """Non-finite values or a diverging optimization."""


class DivergenceError(NumericalError):
    pass


# --- parameters -------------------------------------------------------------------

@dataclass
class ParamSet:
    pf: PhasorKernelParams
    ls: LaserSensorParams
    albedo: AlbedoGrid

    def scalars(self):
        return np.array([self.pf.omega_pf, self.pf.sigma_pf, self.ls.I_l,
                         self.ls.sigma_ls, self.ls.kappa_s, self.ls.eta_s])

    def coords(self):
        """Optimization coordinates: logs of the positive scalars, eta_s as is."""
        s = self.scalars()
        return np.concatenate([np.log(s[:5]), s[5:]])

    @classmethod
    def from_coords(cls, z, albedo_values, like):
        z = np.asarray(z, dtype=float)
        s = np.exp(z[:5])
        return cls(PhasorKernelParams(float(s[0]), float(s[1])),
                   LaserSensorParams(float(s[2]), float(s[3]), float(s[4]), max(float(z[5]), 0.0)),
                   AlbedoGrid(albedo_values, like.albedo.origin, like.albedo.voxel_pitch))

    def with_scalars(self, **kw):
        pf = replace(self.pf, **{k: v for k, v in kw.items() if k in ("omega_pf", "sigma_pf")})
        ls = replace(self.ls, **{k: v for k, v in kw.items() if k in SCALARS[2:]})
        return ParamSet(pf, ls, self.albedo)

    def to_dict(self):
        return {name: float(v) for name, v in zip(SCALARS, self.scalars())}

    def save(self, path, blob_path=None):
        """JSON scalars plus the albedo as raw little-endian float64."""
        path = Path(path)
        blob_path = Path(blob_path) if blob_path else path.with_suffix(".albedo.raw")
        blob_path.write_bytes(np.ascontiguousarray(self.albedo.values, dtype="<f8").tobytes())
        meta = dict(self.to_dict(), albedo_blob=blob_path.name,
                    albedo_dims=list(self.albedo.values.shape),
                    albedo_origin=list(self.albedo.origin),
                    albedo_pitch=list(self.albedo.voxel_pitch),
                    albedo_dtype="float64 little-endian")
        path.write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.read_text())
        raw = np.frombuffer((path.parent / meta["albedo_blob"]).read_bytes(), dtype="<f8")
        albedo = AlbedoGrid(raw.reshape(meta["albedo_dims"]).copy(), meta["albedo_origin"],
                            meta["albedo_pitch"])
        return cls(PhasorKernelParams(meta["omega_pf"], meta["sigma_pf"]),
                   LaserSensorParams(meta["I_l"], meta["sigma_ls"], meta["kappa_s"], meta["eta_s"]),
                   albedo)


def default_params(wall, cfg, wall_pitch, cycles=2.0, albedo=0.5):
    """Starting point: Nyquist phasor kernel, unit intensity, 2-bin responses."""
    bw = cfg.bin_width
    return ParamSet(PhasorKernelParams.nyquist_default(wall_pitch, cfg.c, cycles),
                    LaserSensorParams(1.0, 2 * bw, 1.0 / (2 * bw), 0.0),
                    AlbedoGrid.constant(cfg, albedo))


# --- loss ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    e_h: float
    e_ipf: float
    e_rho: float
    total: float
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2

    def as_row(self):
        return {"e_h": self.e_h, "e_ipf": self.e_ipf, "e_rho": self.e_rho, "total": self.total}


def _safe_sqrt(x):
    # exact value; zero (sub)gradient where x == 0 instead of inf
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def e_h_t(h_rows, hr_rows):
    return torch.mean((h_rows - hr_rows) ** 2)


def e_ipf_t(vol, lambda1=LAMBDA1):
    return lambda1 * torch.mean(torch.abs(torch.amax(vol, dim=1)))


def e_rho_t(rho, lambda2=LAMBDA2):
    """lambda2 * mean |grad_xy rho| over all voxels.

    Forward differences along x and y; a difference that would cross the last
    row or column is zero, so every neighbouring pair is counted once.
    """
    gx = torch.nn.functional.pad(rho[1:] - rho[:-1], (0, 0, 0, 0, 0, 1))
    gy = torch.nn.functional.pad(rho[:, 1:] - rho[:, :-1], (0, 0, 0, 1))
    return lambda2 * torch.mean(_safe_sqrt(gx**2 + gy**2))


def _batch_rows(values, batch, confocal):
    if confocal:
        return values[batch]
    return values[:, batch].reshape(-1, values.shape[-1])


def loss(H, H_R, I_pf, rho, lambda1=LAMBDA1, lambda2=LAMBDA2, batch=None):
    if H.values.shape != H_R.values.shape:
        raise ValueError("H and H_R differ in shape")
    if rho.values.shape != I_pf.values.shape:
        raise ValueError("albedo grid and volume differ in shape")
    batch = np.arange(H.num_sensors) if batch is None else np.asarray(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    with torch.no_grad():
        a = torch.as_tensor(_batch_rows(H.values, batch, H.confocal))
        b = torch.as_tensor(_batch_rows(H_R.values, batch, H.confocal))
        eh = float(e_h_t(a, b))
        ei = float(e_ipf_t(torch.as_tensor(I_pf.values), lambda1))
        er = float(e_rho_t(torch.as_tensor(rho.values), lambda2))
    return LossBreakdown(eh, ei, er, eh + ei + er, lambda1, lambda2)


# --- differentiable pipeline -----------------------------------------------------------

@dataclass
class Branches:
    band: np.ndarray = None
    vol_argmax: int = None
    kept: KeptSamples = None
    normals: NormalBranches = None
    splat: SplatBins = None
    support: int = None


STAGES = ("filter", "rsd", "normalize", "depth", "normals", "albedo", "render", "sensor")


@dataclass
class Trace:
    stages: dict
    e_h: torch.Tensor
    e_ipf: torch.Tensor
    e_rho: torch.Tensor
    branches: Branches
    batch: np.ndarray
    hit: torch.Tensor
    fallback: torch.Tensor
    x_g: torch.Tensor

    @property
    def total(self):
        return self.e_h + self.e_ipf + self.e_rho

    def breakdown(self, lambda1, lambda2):
        eh, ei, er = (float(t.detach()) for t in (self.e_h, self.e_ipf, self.e_rho))
        return LossBreakdown(eh, ei, er, eh + ei + er, lambda1, lambda2)


class Pipeline:
    """Forward model for one measured cube on a fixed wall / volume geometry."""

    def __init__(self, H, wall, cfg, beta=BETA, threshold=THRESHOLD_SYNTHETIC,
                 lambda1=LAMBDA1, lambda2=LAMBDA2, plan=None):
        check_cube_matches(H, wall, cfg)
        self.H, self.wall, self.cfg = H, wall, cfg
        self.beta, self.threshold = beta, threshold
        self.lambda1, self.lambda2 = lambda1, lambda2
        self.plan = plan or RSDPlan(wall, cfg)
        self.rows = torch.tensor(H.rows(), dtype=torch.float64)  # copy, never alias H
        n = cfg.hemisphere_resolution
        self.n = n
        self.dirs = hemisphere_grid(n, wall.wall_normal).dirs
        self.flat = self.dirs.reshape(-1, 3)
        self.grid = AlbedoGrid.constant(cfg, 0.0)
        self.origin = torch.as_tensor(cfg.volume_origin, dtype=torch.float64)
        self.pitch = torch.as_tensor(cfg.voxel_pitch, dtype=torch.float64)
        lo = np.asarray(cfg.volume_origin)
        self.box = (lo, lo + np.asarray(cfg.volume_extent))
        self.omegas_all = angular_frequencies(cfg.num_bins, cfg.bin_width)

    def measured_rows(self, batch):
        vals = self.H.values
        return torch.as_tensor(_batch_rows(vals, batch, self.H.confocal), dtype=torch.float64)

    def run(self, z, albedo, batch=None, frozen=None, retain=False):
        """Evaluate the loss terms at coordinates ``z`` (6,) and albedo values."""
        cfg, wall = self.cfg, self.wall
        fr = frozen or Branches()
        batch = np.arange(wall.num_sensors) if batch is None else np.asarray(batch)
        stages = {}

        def stage(name, t):
            if not torch.all(torch.isfinite(t if not t.is_complex() else torch.view_as_real(t))):
                raise NumericalError(f"non-finite values in forward stage '{name}'")
            if retain and t.requires_grad:
                t.retain_grad()
            stages[name] = t
            return t

        om, sg, il, sl, ks = torch.exp(z[:5]).unbind()
        eta = z[5]
        coeffs, band = filter_rows_t(self.rows, om, sg, cfg.bin_width, cfg.t0, band=fr.band)
        stage("filter", coeffs)
        if not wall.confocal:
            coeffs = coeffs.reshape(wall.num_lasers, wall.num_sensors, -1)
        raw = stage("rsd", self.plan.propagate_t(coeffs, self.omegas_all[band]))
        argmax = fr.vol_argmax if fr.vol_argmax is not None else int(torch.argmax(raw.detach()))
        peak = raw.reshape(-1)[argmax]
        if not peak.detach() > 0:
            raise EmptyReconstruction("empty reconstruction")
        vol = stage("normalize", raw / peak)

        x_s = wall.sensor_points[batch]
        kept = fr.kept
        if kept is None:
            kept = scan_rays(vol.detach().numpy(), cfg.volume_origin, cfg.voxel_pitch, self.box,
                             x_s, self.flat, cfg.ray_step, self.beta, self.threshold)
        S, n = len(batch), self.n
        depth = soft_depth_t(vol, self.origin, self.pitch, x_s, self.flat, kept, self.beta)
        depth = stage("depth", depth.reshape(S, n, n))
        hit = kept.hit.reshape(S, n, n)
        nrm, fallback, nb = normals_t(depth, hit, self.dirs, x_s, fr.normals)
        stage("normals", nrm)
        xs_t = torch.as_tensor(x_s, dtype=torch.float64)
        dirs_t = torch.as_tensor(self.dirs, dtype=torch.float64)
        x_g = xs_t[:, None, None, :] + depth[..., None] * dirs_t[None]
        rho = sample_albedo_t(self.grid, x_g.reshape(-1, 3), values=albedo)
        rho = stage("albedo", rho.reshape(S, n * n))
        hr, splat = render_surface_t(x_g.reshape(S, n * n, 3), nrm.reshape(S, n * n, 3), rho,
                                     hit.reshape(S, n * n), xs_t, wall, cfg,
                                     None if wall.confocal else wall.laser_points,
                                     frozen=fr.splat)
        stage("render", hr)
        support = fr.support
        if support is None:
            support = default_support_bins(sl.item(), ks.item(), cfg.bin_width)
        kernel = psi_kernel_t(il, sl, ks, cfg.bin_width, support)
        HR = stage("sensor", apply_sensor_t(hr, kernel, eta))

        e_h = e_h_t(self.measured_rows(batch), HR)
        e_ipf = e_ipf_t(vol, self.lambda1)
        e_rho = e_rho_t(albedo, self.lambda2)
        branches = Branches(band, argmax, kept, nb, splat, support)
        return Trace(stages, e_h, e_ipf, e_rho, branches, batch, hit, fallback, x_g)


def _leaves(theta):
    z = torch.tensor(theta.coords(), dtype=torch.float64)
    a = torch.tensor(theta.albedo.values, dtype=torch.float64)
    return z, a


@dataclass
class ForwardResult:
    I_pf: VolumeGrid
    G: ImplicitSurface
    H_R: object
    trace: Trace = field(repr=False, default=None)


def forward(H, theta, wall, cfg, batch=None, pipeline=None, **kw):
    """filter -> RSD -> normalize -> extract -> implicit render -> sensor."""
    pipe = pipeline or Pipeline(H, wall, cfg, **kw)
    z, a = _leaves(theta)
    with torch.no_grad():
        tr = pipe.run(z, a, batch)
    vol = tr.stages["normalize"].numpy()
    S, n = len(tr.batch), pipe.n
    depth = tr.stages["depth"].numpy()
    hit = tr.hit.numpy()
    G = ImplicitSurface(hit, depth, np.where(hit[..., None], tr.x_g.numpy(), 0.0),
                        tr.stages["normals"].numpy(), tr.fallback.numpy() | ~hit, pipe.dirs,
                        wall.sensor_points[tr.batch])
    hr = tr.stages["sensor"].numpy()
    if H.confocal:
        values = hr.reshape(S, -1)
    else:
        values = hr.reshape(wall.num_lasers, S, -1)
    H_R = H.with_values(values) if S == H.num_sensors else values
    return ForwardResult(VolumeGrid.for_config(vol, cfg), G, H_R, tr)


def match_intensity(H, theta, wall, cfg, batch=None, pipeline=None, **kw):
    """Rescale I_l to the least-squares fit of the measured cube.

    The re-rendered cube minus eta_s is linear in I_l, so one forward pass
    gives the optimal scale. Useful when the initial I_l is far off.
    """
    pipe = pipeline or Pipeline(H, wall, cfg, **kw)
    res = forward(H, theta, wall, cfg, batch, pipeline=pipe)
    model = res.trace.stages["sensor"].numpy() - theta.ls.eta_s
    data = pipe.measured_rows(res.trace.batch).numpy() - theta.ls.eta_s
    den = float(np.sum(model * model))
    if not den > 0:
        return theta
    scale = float(np.sum(model * data)) / den
    if not scale > 0:
        return theta
    return theta.with_scalars(I_l=theta.ls.I_l * scale)


@dataclass
class Gradient:
    scalars: np.ndarray          # d total / d coords, (6,)
    albedo: np.ndarray           # d total / d albedo voxel
    loss: LossBreakdown
    branches: Branches = field(repr=False, default=None)

    def norm(self):
        return float(np.sqrt(np.sum(self.scalars**2) + np.sum(self.albedo**2)))


def grad(H, theta, wall, cfg, batch=None, pipeline=None, frozen=None, **kw):
    """Reverse-mode gradient of the total loss in optimization coordinates."""
    pipe = pipeline or Pipeline(H, wall, cfg, **kw)
    z, a = _leaves(theta)
    z.requires_grad_(True)
    a.requires_grad_(True)
    tr = pipe.run(z, a, batch, frozen, retain=True)
    total = tr.total
    if not torch.isfinite(total):
        raise NumericalError("non-finite loss")
    total.backward()
    # walk the stages from the loss back toward the parameters
    for name in reversed(STAGES):
        t = tr.stages.get(name)
        if t is not None and t.grad is not None:
            g = t.grad if not t.grad.is_complex() else torch.view_as_real(t.grad)
            if not torch.all(torch.isfinite(g)):
                raise NumericalError(f"non-finite gradient in stage '{name}'")
    if not (torch.all(torch.isfinite(z.grad)) and torch.all(torch.isfinite(a.grad))):
        raise NumericalError("non-finite gradient in stage 'parameters'")
    return Gradient(z.grad.numpy().copy(), a.grad.numpy().copy(),
                    tr.breakdown(pipe.lambda1, pipe.lambda2), tr.branches)


# --- optimizer ---------------------------------------------------------------------------

@dataclass
class OptState:
    iteration: int
    m_s: np.ndarray
    v_s: np.ndarray
    m_a: np.ndarray
    v_a: np.ndarray
    lr_scalar: float = 1e-2
    lr_albedo: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    window: list = field(default_factory=list)

    @classmethod
    def initial(cls, theta, lr_scalar=1e-2, lr_albedo=1e-2):
        shape = theta.albedo.values.shape
        return cls(0, np.zeros(6), np.zeros(6), np.zeros(shape), np.zeros(shape), lr_scalar, lr_albedo)


def _adam(m, v, g, lr, t, st):
    m = st.beta1 * m + (1 - st.beta1) * g
    v = st.beta2 * v + (1 - st.beta2) * g * g
    mhat = m / (1 - st.beta1**t)
    vhat = v / (1 - st.beta2**t)
    return m, v, lr * mhat / (np.sqrt(vhat) + st.eps)


def step(state, theta, grads, optimize=("pf", "ls", "albedo")):
    """Bias-corrected Adam update in optimization coordinates.

    Groups not listed in ``optimize`` keep their values and moments.
    """
    if grads.albedo.shape != state.m_a.shape or grads.scalars.shape != (6,):
        raise ValueError("gradient shapes do not match the optimizer state")
    t = state.iteration + 1
    mask = np.zeros(6, bool)
    for g in optimize:
        mask[list(GROUPS[g])] = True
    z = theta.coords()
    m_s, v_s, d = _adam(state.m_s, state.v_s, grads.scalars, state.lr_scalar, t, state)
    m_s = np.where(mask, m_s, state.m_s)
    v_s = np.where(mask, v_s, state.v_s)
    z = np.where(mask, z - d, z)
    z[5] = max(z[5], 0.0)
    a = theta.albedo.values
    m_a, v_a = state.m_a, state.v_a
    if "albedo" in optimize:
        m_a, v_a, da = _adam(m_a, v_a, grads.albedo, state.lr_albedo, t, state)
        a = np.clip(a - da, 0.0, 1.0)
    new_state = replace(state, iteration=t, m_s=m_s, v_s=v_s, m_a=m_a, v_a=v_a,
                        window=list(state.window))
    new = ParamSet.from_coords(z, a, theta)
    # exp(log(x)) may differ from x in the last bit; keep untouched scalars as they were
    same = z == theta.coords()
    if same.any():
        old = theta.scalars()
        new = new.with_scalars(**{k: float(old[i]) for i, k in enumerate(SCALARS) if same[i]})
    return new_state, new


# --- calibration loop -----------------------------------------------------------------------

@dataclass
class HistoryRow:
    iteration: int
    scalars: np.ndarray
    loss: LossBreakdown

    def as_dict(self):
        d = {"iteration": self.iteration}
        d.update({k: float(v) for k, v in zip(SCALARS, self.scalars)})
        d.update(self.loss.as_row())
        return d


@dataclass
class CalibrationResult:
    params: ParamSet
    history: list
    converged: bool
    state: OptState = field(repr=False, default=None)


def sample_batch(num_sensors, fraction, seed, iteration):
    k = max(1, int(round(fraction * num_sensors)))
    if k >= num_sensors:
        return np.arange(num_sensors)
    rng = np.random.default_rng([int(seed), int(iteration)])
    return np.sort(rng.choice(num_sensors, size=k, replace=False))


def moving_average_converged(totals, window=10, tol=1e-4):
    """Relative change between consecutive ``window``-long moving averages < tol."""
    if len(totals) < window + 1:
        return False
    now = float(np.mean(totals[-window:]))
    prev = float(np.mean(totals[-window - 1:-1]))
    return abs(now - prev) <= tol * abs(prev)


def calibrate(H, theta0, wall, cfg, max_iters=200, batch_fraction=0.25, seed=0,
              optimize=("pf", "ls", "albedo"), lr_scalar=1e-2, lr_albedo=1e-2, window=10,
              tol=1e-4, divergence_factor=1e3, checkpoint_every=0, checkpoint_dir=None,
              callback=None, pipeline=None, **kw):
    """Loop forward -> loss -> grad -> Adam step until convergence or ``max_iters``."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    pipe = pipeline or Pipeline(H, wall, cfg, **kw)
    theta = theta0
    state = OptState.initial(theta0, lr_scalar, lr_albedo)
    history, totals = [], []
    converged = False
    for it in range(max_iters):
        batch = sample_batch(wall.num_sensors, batch_fraction, seed, it)
        g = grad(H, theta, wall, cfg, batch, pipeline=pipe)
        row = HistoryRow(it, theta.scalars(), g.loss)
        history.append(row)
        totals.append(g.loss.total)
        if not math.isfinite(g.loss.total):
            raise NumericalError(f"non-finite loss at iteration {it}")
        if g.loss.total > divergence_factor * history[0].loss.total:
            raise DivergenceError(
                f"diverged at iteration {it}: total loss {g.loss.total:.6g} exceeds "
                f"{divergence_factor:g} x initial {history[0].loss.total:.6g}")
        state, theta = step(state, theta, g, optimize)
        state.window = totals[-window:]
        if callback is not None:
            callback(it, theta, row)
        if checkpoint_every and checkpoint_dir and (it + 1) % checkpoint_every == 0:
            theta.save(Path(checkpoint_dir) / f"checkpoint_{it + 1:05d}.json")
        if moving_average_converged(totals, window, tol):
            converged = True
            break
    return CalibrationResult(theta, history, converged, state)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            d = row.as_dict()
            w.writerow({k: (d[k] if k == "iteration" else repr(float(d[k]))) for k in HISTORY_FIELDS})


def read_history(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


# --- verification and ablation -----------------------------------------------------------------

@dataclass
class GradCheck:
    name: str
    analytic: float
    numeric: float
    ok: bool


def check_gradients(H, theta, wall, cfg, batch=None, voxels=(), rel_step=1e-4, rtol=1e-3,
                    atol=1e-8, pipeline=None, **kw):
    """Central differences of the branch-frozen loss against the reverse-mode gradient.

    Log coordinates take a step of ``rel_step`` (a relative step of the
    parameter itself); eta_s and albedo voxels take ``rel_step * max(|x|, 1)``.
    """
    pipe = pipeline or Pipeline(H, wall, cfg, **kw)
    g = grad(H, theta, wall, cfg, batch, pipeline=pipe)
    z0, a0 = _leaves(theta)

    def total(z, a):
        with torch.no_grad():
            return float(pipe.run(z, a, batch, g.branches).total)

    def compare(name, analytic, fp, fm, h):
        num = (fp - fm) / (2 * h)
        ok = abs(analytic - num) <= max(rtol * max(abs(analytic), abs(num)), atol)
        return GradCheck(name, float(analytic), float(num), bool(ok))

    out = []
    for i, name in enumerate(SCALARS):
        h = rel_step if i < 5 else rel_step * max(abs(float(z0[i])), 1.0)
        zp, zm = z0.clone(), z0.clone()
        zp[i] += h
        zm[i] -= h
        out.append(compare(name, g.scalars[i], total(zp, a0), total(zm, a0), h))
    for v in voxels:
        v = tuple(int(x) for x in v)
        h = rel_step * max(abs(float(a0[v])), 1.0)
        ap, am = a0.clone(), a0.clone()
        ap[v] += h
        am[v] -= h
        out.append(compare(f"albedo{list(v)}", g.albedo[v], total(z0, ap), total(z0, am), h))
    return out, g


def ablation(H, theta0, wall, cfg, variants, **kw):
    """Calibrate once per parameter-group subset; returns {label: final E_H}."""
    pipe = kw.pop("pipeline", None) or Pipeline(H, wall, cfg)
    out = {}
    for label, groups in variants.items():
        res = calibrate(H, theta0, wall, cfg, optimize=groups, pipeline=pipe, **kw)
        final = grad(H, res.params, wall, cfg, None, pipeline=pipe).loss
        out[label] = final.e_h
    return out
