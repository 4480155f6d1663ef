"""Command-line entry point: ``voxgrad <command> [options]``.

Commands: gen, train, mesh, eval, diagnose, bench-reg. Exit codes are 0 on
success, 1 for usage or configuration errors, 2 for file errors and 3 when
training produces non-finite values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from voxgrad.errors import NumericFailure

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("voxgrad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _threads(args) -> int:
    if args.deterministic:
        return 1
    return args.threads or os.cpu_count() or 1


# --- gen ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    from voxgrad.fileio import write_ppm
    from voxgrad.scenes import make_rig, render_ground_truth, resolve_scene

    scene = resolve_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = make_rig(scene, args.views, args.width, args.height)
    for i, cam in enumerate(cams):
        img, mask = render_ground_truth(scene, cam)
        write_ppm(out / f"image_{i:03d}.ppm", img)
        write_ppm(out / f"mask_{i:03d}.ppm", mask.astype(np.float64))
    _write_json(out / "cameras.json", {"cameras": [c.to_dict() for c in cams]})
    _write_json(out / "scene.json", scene.to_dict())
    print(f"wrote {len(cams)} views to {out}")
    return EXIT_OK


# --- train ----------------------------------------------------------------------


def _train_config(args):
    from voxgrad.training import TrainConfig, config_from_dict, desk_config

    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        cfg = config_from_dict(raw)
    elif args.desk:
        cfg = desk_config(args.scene or "sphere", steps=args.steps or 300)
    else:
        cfg = TrainConfig()
    d = cfg.to_dict()
    for key in ("scene", "seed", "gradient", "out"):
        value = getattr(args, key)
        if value is not None:
            d[key] = value
    if args.steps is not None:
        d["schedules"]["total_steps"] = args.steps
    if args.no_normal_path:
        d["normal_to_radiance"] = False
    d["deterministic"] = bool(args.deterministic or d["deterministic"])
    if args.threads or args.deterministic or "threads" not in raw:
        d["threads"] = _threads(args)
    return config_from_dict(d)


def cmd_train(args) -> int:
    from voxgrad.scenes import resolve_scene
    from voxgrad.training import load_checkpoint, train

    state = None
    if args.resume:
        state, cfg = load_checkpoint(args.resume)
        if args.out:
            cfg.out = args.out
        if args.steps is not None:
            cfg.schedules.total_steps = args.steps
    else:
        cfg = _train_config(args)
    if not cfg.out:
        raise UsageError("train needs --out (or 'out' in the config)")
    scene = resolve_scene(cfg.scene)
    t0 = time.perf_counter()
    state, rows = train(scene, cfg, state=state)
    last = rows[-1] if rows else {}
    report = {"steps": state.step, "seconds": time.perf_counter() - t0, "final": last}
    _write_json(Path(cfg.out) / "train_report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --- mesh / eval --------------------------------------------------------------------


def _load_grid_arg(path: str):
    from voxgrad.sdf_grid import load_grid

    p = Path(path)
    return load_grid(p / "grid.sdfg" if p.is_dir() else p)


def cmd_mesh(args) -> int:
    from voxgrad.fileio import write_ply
    from voxgrad.meshing import marching_cubes
    from voxgrad.sdf_grid import gaussian_filter

    grid = _load_grid_arg(args.checkpoint)
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    if args.sigma > 0:
        grid = gaussian_filter(grid, args.sigma * grid.spacing)
    mesh = marching_cubes(grid)
    write_ply(args.out, mesh.vertices, mesh.faces)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from voxgrad.fileio import read_ply
    from voxgrad.meshing import TriangleMesh, chamfer, marching_cubes, sample_surface, surface_reference
    from voxgrad.scenes import resolve_scene

    if bool(args.mesh) == bool(args.checkpoint):
        raise UsageError("eval needs exactly one of --mesh or --checkpoint")
    eps = None
    if args.mesh:
        v, f = read_ply(args.mesh)
        mesh = TriangleMesh(v, f)
    else:
        grid = _load_grid_arg(args.checkpoint)
        eps = grid.spacing
        mesh = marching_cubes(grid)
    if args.reference:
        v, f = read_ply(args.reference)
        # same seed: a mesh compared with itself scores exactly zero
        ref = sample_surface(TriangleMesh(v, f), args.samples, args.seed)
    else:
        ref = surface_reference(resolve_scene(args.scene or "sphere"), args.samples, args.seed + 1)
    pts = sample_surface(mesh, args.samples, args.seed)
    report = {"chamfer": chamfer(pts, ref), "samples": args.samples, "faces": int(len(mesh.faces))}
    if eps is not None:
        report["spacing"] = eps
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --- diagnose --------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    from voxgrad import diagnostics as dg

    out = Path(args.out)
    gaps_a, gaps_i = dg.continuity_trials(args.trials, seed=args.seed)
    summary, coarse, fine = dg.glitch_study(resolution=args.resolution, n_samples=args.samples)
    out.mkdir(parents=True, exist_ok=True)
    coarse.write_csv(out / "ray_trace.csv")
    fine.write_csv(out / "ray_trace_fine.csv")
    report = {
        "trials": args.trials,
        "max_analytical_gap": float(gaps_a.max()),
        "min_analytical_gap": float(gaps_a.min()),
        "share_analytical_gap_above_1e-3": float(np.mean(gaps_a > 1e-3)),
        "max_interpolated_gap": float(gaps_i.max()),
        **summary,
    }
    _write_json(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --- bench-reg --------------------------------------------------------------------


def bench_inputs(resolution: int, batch: int, seed: int):
    """A noisy sphere grid and ``batch`` sample points inside it."""
    from voxgrad.sdf_grid import SdfGrid

    rng = np.random.default_rng(seed)
    lo, hi = -np.ones(3), np.ones(3)
    grid = SdfGrid.from_function(lambda p: np.linalg.norm(p, axis=-1) - 0.5, resolution, lo, hi, dtype=np.float64)
    grid.values = grid.values + 0.01 * rng.normal(size=grid.values.shape)
    points = rng.uniform(-0.9, 0.9, size=(batch, 3))
    return grid, points


def run_bench(mode: str, resolution: int, batch: int, repeats: int, workers: int, seed: int = 0) -> tuple[dict, np.ndarray]:
    """Time ``repeats`` passes of collect + both losses + accumulate."""
    from voxgrad.regularizer import regularization_gradient

    grid, points = bench_inputs(resolution, batch, seed)
    w_eik, w_curv = 1e-2, 1e-6

    def once():
        return regularization_gradient(points, grid, w_eik, w_curv, mode=mode, workers=workers)

    le, lc, grad = once()  # warm-up; also the returned gradient
    t0 = time.perf_counter()
    for _ in range(repeats):
        once()
    seconds = (time.perf_counter() - t0) / repeats
    tracemalloc.start()
    once()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    report = {
        "mode": mode,
        "resolution": resolution,
        "batch": batch,
        "repeats": repeats,
        "workers": workers,
        "seconds_per_batch": seconds,
        "batches_per_second": 1.0 / seconds if seconds > 0 else float("inf"),
        "peak_bytes": int(peak),
        "loss_eik": float(le),
        "loss_curv": float(lc),
    }
    return report, grad


def cmd_bench_reg(args) -> int:
    modes = ["tape-oracle", "manual-serial", "manual-parallel"] if args.mode == "all" else [args.mode]
    workers = _threads(args)
    reports, grads = [], {}
    for mode in modes:
        rep, grads[mode] = run_bench(mode, args.resolution, args.batch, args.repeats, workers, args.seed)
        reports.append(rep)
    if len(grads) > 1:
        ref = grads[modes[0]]
        scale = max(float(np.abs(ref).max()), 1e-300)
        for rep in reports:
            rep["max_rel_diff_vs_" + modes[0]] = float(np.abs(grads[rep["mode"]] - ref).max() / scale)
    out = {"reports": reports}
    if args.out:
        _write_json(Path(args.out), out)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with configuration keys")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    common.add_argument("--gradient", choices=["analytical", "interpolated"], default=None)
    common.add_argument("--steps", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="voxgrad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="render a synthetic multi-view dataset")
    g.add_argument("--scene", default="sphere", help="bundled scene name or scene JSON")
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="optimize an SDF grid against a scene")
    t.add_argument("--scene", default=None, help="bundled scene name or scene JSON")
    t.add_argument("--desk", action="store_true", help="start from the short single-core preset")
    t.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    t.add_argument("--no-normal-path", action="store_true", help="do not feed normals to the radiance field")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mesh", parents=[common], help="extract the zero level set as PLY")
    m.add_argument("checkpoint", help="checkpoint directory or .sdfg grid file")
    m.add_argument("--sigma", type=float, default=0.0, help="Gaussian pre-filter width in grid spacings")
    m.set_defaults(func=cmd_mesh)

    e = sub.add_parser("eval", parents=[common], help="Chamfer distance to the analytic surface")
    e.add_argument("--mesh", default=None, help="PLY mesh to evaluate")
    e.add_argument("--checkpoint", default=None, help="checkpoint directory or .sdfg file to mesh and evaluate")
    e.add_argument("--scene", default=None, help="bundled scene name or scene JSON (default sphere)")
    e.add_argument("--reference", default=None, help="compare against this PLY instead of the scene")
    e.add_argument("--samples", type=int, default=20000)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", parents=[common], help="junction continuity and 2-D ray trace study")
    d.add_argument("--trials", type=int, default=100)
    d.add_argument("--resolution", type=int, default=16)
    d.add_argument("--samples", type=int, default=256)
    d.set_defaults(func=cmd_diagnose)

    b = sub.add_parser("bench-reg", parents=[common], help="time the regularizer implementations")
    b.add_argument("--mode", choices=["tape-oracle", "manual-serial", "manual-parallel", "all"], default="all")
    b.add_argument("--resolution", type=int, default=64)
    b.add_argument("--batch", type=int, default=2048)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench_reg)
    return p


def _validate(args) -> None:
    if args.command in ("gen", "mesh", "diagnose") and not args.out:
        raise UsageError(f"{args.command} needs --out")
    for name in ("views", "width", "height", "trials", "samples", "repeats", "batch"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.seed is None:
        args.seed = 0 if args.command != "train" else None
    if args.command != "train" and args.config:
        # other commands read their options from the config's keys
        cfg = json.loads(Path(args.config).read_text())
        known = set(vars(args)) - {"func", "command", "config"}
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for k, v in cfg.items():
            setattr(args, k, v)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _validate(args)
        return args.func(args)
    except NumericFailure as exc:
        print(f"voxgrad: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        print(f"voxgrad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"voxgrad: file error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
