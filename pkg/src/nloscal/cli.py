"""Command-line front end: render, reconstruct, extract, calibrate, noise-sweep, info.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import calib, plotting
from .phasor import EmptyReconstruction, PhasorKernelParams, read_volume, reconstruct, write_volume
from .scene import CONFIG_KEYS, format_config, load_config, read_obj, write_obj
from .sensor import LaserSensorParams, add_poisson_noise, apply_sensor, photon_scale_for_snr, snr_db
from .surface import (BETA, THRESHOLD_SYNTHETIC, AlbedoGrid, export_pointcloud, extract_surface,
                      read_ply)
from .synthetic import default_phasor, plane_scene, wall_pitch
from .transient import check_cube_matches, cube_metadata, read_cube, write_cube, render_mesh

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
MANIFEST = "manifest.json"


class InputError(Exception):
    pass


# --- helpers ------------------------------------------------------------------------

def _threads(args):
    n = args.threads or int(os.environ.get("NLOS_THREADS", 0) or 0) or os.cpu_count() or 1
    torch.set_num_threads(max(1, n))
    return max(1, n)


def _existing(path, what):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise InputError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in CONFIG_KEYS:
            raise InputError(f"unknown config key {key!r}")
        out[key] = value.replace(",", " ").split()
    return out


def _load_scene(args, extra=None):
    """(cfg, wall, effective config text) from --config plus --set overrides; flags win."""
    over = _overrides(getattr(args, "set", None))
    over.update(extra or {})
    path = _existing(args.config, "config file")
    try:
        cfg, wall = load_config(path, over)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    text = path.read_text()
    if over:
        # later lines win when the text is parsed again
        text = text.rstrip("\n") + "\n# overrides\n" + "".join(
            f"{k} = {' '.join(v)}\n" for k, v in over.items())
    return cfg, wall, text


def _output_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions():
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"nloscal": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def write_manifest(out, args, started, outputs, parameters=None, config_text=None):
    """One manifest per output directory: inputs, settings, versions and output checksums."""
    argv = getattr(args, "argv", None)
    manifest = {
        "command": args.command,
        "argv": argv,
        "config_path": str(getattr(args, "config", None)) if getattr(args, "config", None) else None,
        "config": config_text,
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "resolved_threads", None),
        "parameters": parameters or {},
        "versions": _versions(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {Path(p).name: _sha256(p) for p in sorted(map(str, outputs))},
    }
    (Path(out) / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(out):
    return json.loads((Path(out) / MANIFEST).read_text())


def _write_cube_files(out, name, cube, **meta):
    path = out / f"{name}.nltc"
    write_cube(path, cube)
    side = out / f"{name}.nltc.json"
    side.write_text(json.dumps(cube_metadata(cube, **meta), indent=2, sort_keys=True))
    return [path, side]


def _read_cube_for(path, wall, cfg):
    cube = read_cube(_existing(path, "cube file"))
    try:
        check_cube_matches(cube, wall, cfg)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return cube


def _phasor(args, wall, cfg):
    if getattr(args, "params", None):
        return calib.ParamSet.load(_existing(args.params, "parameter file")).pf
    pf = default_phasor(wall, cfg, args.cycles)
    return PhasorKernelParams(args.omega_pf or pf.omega_pf, args.sigma_pf or pf.sigma_pf)


def _write_volume_files(out, name, vol, **meta):
    path = out / f"{name}.raw"
    write_volume(path, vol, **meta)
    pngs = plotting.save_volume_projections(str(out / name), vol.values)
    return [path, Path(str(path) + ".json"), *map(Path, pngs.values())]


# --- commands ------------------------------------------------------------------------

def cmd_render(args):
    out = _output_dir(args.out)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    outputs = []
    if args.plane_demo:
        res = args.plane_wall_res
        sc = plane_scene(wall_res=res, volume_res=(res, res, 32), hemisphere=args.plane_hemisphere,
                         render_hemisphere=args.plane_hemisphere)
        cfg, wall, mesh = sc.cfg, sc.wall, sc.mesh
        cfg_path, mesh_path = out / "scene.cfg", out / "mesh.obj"
        cfg_path.write_text(format_config(cfg, (1.0, 1.0), wall.sensor_shape))
        write_obj(mesh, mesh_path, out / "mesh.albedo.json")
        outputs += [cfg_path, mesh_path, out / "mesh.albedo.json"]
        args.config = str(cfg_path)
        ls_default = sc.ls
    else:
        if not args.config or not args.mesh:
            raise InputError("render needs --config and --mesh (or --plane-demo)")
        _existing(args.mesh, "mesh file")
        ls_default = None
    cfg, wall, text = _load_scene(args)
    if not args.plane_demo:
        albedo = _existing(args.albedo, "albedo file") if args.albedo else None
        try:
            mesh = read_obj(args.mesh, albedo)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    bw = cfg.bin_width
    base = ls_default or LaserSensorParams(1.0, 2 * bw, 1.0 / (2 * bw), 0.0)
    ls = LaserSensorParams(args.I_l if args.I_l is not None else base.I_l,
                           args.sigma_ls if args.sigma_ls is not None else base.sigma_ls,
                           args.kappa_s if args.kappa_s is not None else base.kappa_s,
                           args.eta_s if args.eta_s is not None else base.eta_s)
    clean = apply_sensor(render_mesh(mesh, wall, cfg, threads=args.resolved_threads), ls)
    cube, scale = clean, None
    if args.noise_scale is not None or args.snr_db is not None:
        scale = args.noise_scale if args.noise_scale is not None else photon_scale_for_snr(clean, args.snr_db)
        cube = add_poisson_noise(clean, scale, args.seed)
    params = {"I_l": ls.I_l, "sigma_ls": ls.sigma_ls, "kappa_s": ls.kappa_s, "eta_s": ls.eta_s,
              "photon_scale": scale, "mesh": args.mesh, "triangles": int(len(mesh.triangles))}
    if scale is not None:
        params["snr_db"] = snr_db(clean, cube)
    outputs += _write_cube_files(out, "cube", cube, **{k: v for k, v in params.items() if k != "mesh"})
    write_manifest(out, args, started, outputs, params, text)
    print(f"wrote {out / 'cube.nltc'} ({cube.num_sensors} sensors x {cube.num_bins} bins)")


def cmd_reconstruct(args):
    out = _output_dir(args.out)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg, wall, text = _load_scene(args)
    cube = _read_cube_for(args.cube, wall, cfg)
    pf = _phasor(args, wall, cfg)
    _, vol = reconstruct(cube, pf, wall, cfg, oracle=args.oracle)
    params = {"omega_pf": pf.omega_pf, "sigma_pf": pf.sigma_pf, "oracle": args.oracle,
              "cube": str(args.cube)}
    outputs = _write_volume_files(out, "volume", vol, omega_pf=pf.omega_pf, sigma_pf=pf.sigma_pf)
    write_manifest(out, args, started, outputs, params, text)
    print(f"wrote {out / 'volume.raw'} {list(vol.values.shape)}")


def cmd_extract(args):
    out = _output_dir(args.out)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    extra = {"hemisphere_resolution": [str(args.hemisphere)]} if args.hemisphere else {}
    cfg, wall, text = _load_scene(args, extra)
    try:
        vol = read_volume(_existing(args.volume, "volume file"))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.params:
        rho = calib.ParamSet.load(_existing(args.params, "parameter file")).albedo
    else:
        rho = AlbedoGrid.constant(cfg, args.albedo)
    G = extract_surface(vol, wall, cfg, args.beta, args.threshold)
    ply = out / "surface.ply"
    count = export_pointcloud(G, rho, ply)
    pngs = plotting.save_surface_maps(str(out / "surface"), G)
    params = {"beta": args.beta, "threshold": args.threshold, "points": count,
              "hemisphere_resolution": cfg.hemisphere_resolution, "volume": str(args.volume)}
    write_manifest(out, args, started, [ply, *map(Path, pngs.values())], params, text)
    print(f"wrote {ply} ({count} points)")


def cmd_calibrate(args):
    out = _output_dir(args.out)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg, wall, text = _load_scene(args)
    cube = _read_cube_for(args.cube, wall, cfg)
    if args.init:
        theta0 = calib.ParamSet.load(_existing(args.init, "initial parameter file"))
    else:
        theta0 = calib.default_params(wall, cfg, wall_pitch(wall), args.cycles, args.albedo)
        theta0 = calib.match_intensity(cube, theta0, wall, cfg, beta=args.beta,
                                       threshold=args.threshold)

    def report(it, theta, row):
        if args.verbose:
            print(f"iter {it:4d} total {row.loss.total:.6g} e_h {row.loss.e_h:.6g}", flush=True)

    res = calib.calibrate(cube, theta0, wall, cfg, max_iters=args.iters,
                          batch_fraction=args.batch_fraction, seed=args.seed,
                          optimize=tuple(args.optimize.split(",")), lr_scalar=args.lr,
                          lr_albedo=args.lr, divergence_factor=args.divergence_factor,
                          callback=report, beta=args.beta,
                          threshold=args.threshold)
    theta = res.params
    params_path = out / "params.json"
    theta.save(params_path)
    hist = out / "history.csv"
    calib.write_history(hist, res.history)
    conv = out / "convergence.png"
    plotting.convergence_figure(conv, calib.read_history(hist))
    fin = calib.forward(cube, theta, wall, cfg, beta=args.beta, threshold=args.threshold)
    ply = out / "surface.ply"
    count = export_pointcloud(fin.G, theta.albedo, ply)
    outputs = [params_path, params_path.with_suffix(".albedo.raw"), hist, conv, ply]
    outputs += _write_volume_files(out, "volume", fin.I_pf)
    params = dict(theta.to_dict(), iterations=len(res.history), converged=res.converged,
                  points=count, cube=str(args.cube), init=args.init, optimize=args.optimize,
                  batch_fraction=args.batch_fraction, lr=args.lr,
                  divergence_factor=args.divergence_factor, beta=args.beta,
                  threshold=args.threshold, initial=theta0.to_dict())
    write_manifest(out, args, started, outputs, params, text)
    print(f"calibrated in {len(res.history)} iterations (converged={res.converged}); "
          f"loss {res.history[0].loss.total:.6g} -> {res.history[-1].loss.total:.6g}")


def cmd_noise_sweep(args):
    out = _output_dir(args.out)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg, wall, text = _load_scene(args)
    clean = _read_cube_for(args.cube, wall, cfg)
    pf = _phasor(args, wall, cfg)
    scales = [float(s) for s in args.scales.replace(",", " ").split()]
    if not scales or any(not s > 0 for s in scales):
        raise InputError("--scales needs positive photon scales")
    rows, outputs = [], []
    for i, scale in enumerate(scales):
        # one noise stream per sweep entry, all derived from --seed
        noisy = add_poisson_noise(clean, scale, args.seed * 1000003 + i)
        snr = snr_db(clean, noisy)
        name = f"volume_{i:02d}"
        try:
            _, vol = reconstruct(noisy, pf, wall, cfg)
        except EmptyReconstruction:
            rows.append({"index": i, "photon_scale": scale, "snr_db": snr, "volume": ""})
            continue
        outputs += _write_volume_files(out, name, vol, photon_scale=scale, snr_db=snr)
        rows.append({"index": i, "photon_scale": scale, "snr_db": snr, "volume": f"{name}.raw"})
    table = out / "snr.csv"
    write_snr_table(table, rows)
    fig = out / "snr.png"
    plotting.noise_figure(fig, [r["photon_scale"] for r in rows], [r["snr_db"] for r in rows])
    write_manifest(out, args, started, [table, fig, *outputs],
                   {"scales": scales, "omega_pf": pf.omega_pf, "sigma_pf": pf.sigma_pf,
                    "cube": str(args.cube)}, text)
    for r in rows:
        print(f"scale {r['photon_scale']:.6g}  snr {r['snr_db']:.3f} dB")


def write_snr_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("index", "photon_scale", "snr_db", "volume"))
        w.writeheader()
        for r in rows:
            w.writerow({"index": r["index"], "photon_scale": repr(float(r["photon_scale"])),
                        "snr_db": repr(float(r["snr_db"])), "volume": r["volume"]})


def read_snr_table(path):
    with open(path, newline="") as fh:
        return [{"index": int(r["index"]), "photon_scale": float(r["photon_scale"]),
                 "snr_db": float(r["snr_db"]), "volume": r["volume"]} for r in csv.DictReader(fh)]


def cmd_info(args):
    path = _existing(args.path, "file")
    name = path.name
    if name.endswith(".nltc"):
        cube = read_cube(path)
        v = cube.values
        info = dict(cube_metadata(cube), min=float(v.min()), max=float(v.max()), sum=float(v.sum()))
    elif name.endswith(".ply"):
        pts = read_ply(path)
        info = {"format": "PLY", "points": len(pts)}
        if len(pts):
            info.update(bbox_min=pts[:, :3].min(axis=0).tolist(),
                        bbox_max=pts[:, :3].max(axis=0).tolist(),
                        mean_albedo=float(pts[:, 6].mean()))
    elif name.endswith(".raw") and Path(str(path) + ".json").is_file():
        vol = read_volume(path)
        info = {"format": "volume", "dims": list(vol.values.shape), "origin": list(vol.origin),
                "voxel_pitch": list(vol.voxel_pitch), "max": float(vol.values.max())}
    elif name.endswith(".json"):
        info = json.loads(path.read_text())
    else:
        try:
            cfg, wall = load_config(path)
        except ValueError as exc:
            raise InputError(f"{path}: unrecognised file ({exc})") from exc
        info = {"format": "config", "sensors": wall.num_sensors, "lasers": wall.num_lasers,
                "confocal": wall.confocal, "num_bins": cfg.num_bins, "bin_width": cfg.bin_width,
                "volume_resolution": list(cfg.volume_resolution),
                "voxel_pitch": list(cfg.voxel_pitch), "ray_step": cfg.ray_step}
    print(json.dumps(info, indent=2, sort_keys=True, default=str))


# --- parser ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="nloscal", description="NLOS reconstruction and calibration")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $NLOS_THREADS or all logical cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="scene config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable; vectors comma separated)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    def phasor_flags(sp):
        sp.add_argument("--params", help="parameter JSON supplying omega_pf / sigma_pf")
        sp.add_argument("--omega-pf", type=float, default=None)
        sp.add_argument("--sigma-pf", type=float, default=None)
        sp.add_argument("--cycles", type=float, default=2.0,
                        help="envelope width in periods for the default kernel")

    sp = sub.add_parser("render", help="synthesize a transient cube from a mesh")
    common(sp, config_required=False)
    sp.add_argument("--mesh", help="triangulated OBJ")
    sp.add_argument("--albedo", help="per-face albedo JSON")
    sp.add_argument("--plane-demo", action="store_true",
                    help="write and render the built-in plane scene")
    sp.add_argument("--plane-wall-res", type=int, default=16)
    sp.add_argument("--plane-hemisphere", type=int, default=16)
    sp.add_argument("--I-l", dest="I_l", type=float, default=None)
    sp.add_argument("--sigma-ls", type=float, default=None, help="seconds")
    sp.add_argument("--kappa-s", type=float, default=None, help="1 / seconds")
    sp.add_argument("--eta-s", type=float, default=None)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--noise-scale", type=float, default=None, help="Poisson photon scale")
    g.add_argument("--snr-db", type=float, default=None, help="pick the photon scale for this SNR")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("reconstruct", help="phasor-field volume from a cube")
    common(sp)
    sp.add_argument("--cube", required=True)
    phasor_flags(sp)
    sp.add_argument("--oracle", action="store_true", help="direct RSD summation (small inputs)")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("extract", help="implicit surface from a volume")
    common(sp)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--beta", type=float, default=BETA)
    sp.add_argument("--threshold", type=float, default=THRESHOLD_SYNTHETIC)
    sp.add_argument("--hemisphere", type=int, default=None, help="rays per side per sensor")
    sp.add_argument("--params", help="parameter JSON supplying the albedo grid")
    sp.add_argument("--albedo", type=float, default=0.5, help="constant albedo without --params")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("calibrate", help="jointly optimize imaging parameters")
    common(sp)
    sp.add_argument("--cube", required=True)
    sp.add_argument("--init", help="initial parameter JSON (default: Nyquist kernel, unit sensor)")
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--batch-fraction", type=float, default=0.25)
    sp.add_argument("--optimize", default="pf,ls,albedo", help="comma separated groups")
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--divergence-factor", type=float, default=1e3,
                    help="abort when the total loss exceeds this multiple of the first one")
    sp.add_argument("--beta", type=float, default=BETA)
    sp.add_argument("--threshold", type=float, default=THRESHOLD_SYNTHETIC)
    sp.add_argument("--cycles", type=float, default=2.0)
    sp.add_argument("--albedo", type=float, default=0.5)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("noise-sweep", help="Poisson noise at several photon scales")
    common(sp)
    sp.add_argument("--cube", required=True, help="clean cube")
    sp.add_argument("--scales", required=True, help="photon scales, comma separated")
    phasor_flags(sp)
    sp.set_defaults(func=cmd_noise_sweep)

    sp = sub.add_parser("info", help="describe a cube, volume, PLY, JSON or config file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_info)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    args.resolved_threads = _threads(args)
    if args.command == "calibrate":
        bad = set(args.optimize.split(",")) - set(calib.GROUPS)
        if bad:
            print(f"error: unknown optimization group(s) {sorted(bad)}", file=sys.stderr)
            return EXIT_INPUT
    try:
        args.func(args)
    except (EmptyReconstruction, calib.NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
