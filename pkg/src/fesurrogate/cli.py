"""Command-line entry point: ``fesurrogate <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 simulation failure,
4 compatibility error, 5 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .fesolver import FESolverError, generate_dataset
from .geometry import GeometryError, generate_phantom
from .evaluation import EvaluationError
from .inference import InferenceError
from .io import (Dataset, FormatError, atomic_write, read_dataset, read_manifest, read_mesh, write_dataset,
                 write_json, write_mesh, write_prediction)
from .network import CompatibilityError

EXIT_OK, EXIT_CONFIG, EXIT_SIMULATION, EXIT_COMPAT, EXIT_INTERNAL = 0, 2, 3, 4, 5

log = logging.getLogger("fesurrogate")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> PipelineConfig:
    return load_config(getattr(args, "config", None)).with_seed(getattr(args, "seed", None))


def _read_datasets(dirs) -> list:
    out = []
    for d in dirs or []:
        if not (Path(d) / "manifest.json").exists():
            raise ConfigError(f"{d}: not a dataset directory (manifest.json missing)")
        out.append(read_dataset(d))
    return out


def _samples(datasets) -> list:
    return [s for ds in datasets for s in ds.samples]


def cmd_phantom(args) -> int:
    cfg = _config(args)
    spec = cfg.phantom
    try:
        mesh = generate_phantom(spec)
    except GeometryError as exc:
        raise ConfigError(f"infeasible phantom: {exc}") from None
    out = Path(args.out)
    write_mesh(out / "mesh.bmsh", mesh)
    write_json(out / "manifest.json", {
        "kind": "phantom", "version": __version__, "phantom": spec.to_dict(), "seed": cfg.seed,
        "n_nodes": mesh.n_nodes, "n_tets": mesh.n_tets,
        "region_counts": np.bincount(mesh.labels, minlength=4).tolist(),
        "n_fixed": int(mesh.fixed_nodes.size), "n_loaded": int(mesh.loaded_nodes.size)})
    print(f"phantom: {mesh.n_nodes} nodes, {mesh.n_tets} tets -> {out / 'mesh.bmsh'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    mesh_dir = Path(args.mesh)
    manifest = read_manifest(mesh_dir)
    from .geometry import PhantomSpec
    spec = PhantomSpec.from_dict(manifest["phantom"])
    mesh = read_mesh(mesh_dir / "mesh.bmsh", spec)
    sim = cfg.simulation
    n = args.n if args.n is not None else sim.n_sims
    scale = args.scale if args.scale is not None else sim.displacement_scale
    samples, stats = generate_dataset(mesh, n, cfg.materials, scale, seed=cfg.seed,
                                      load_steps=sim.load_steps)
    phantom_id = args.phantom_id if args.phantom_id is not None else spec.seed
    for s in samples:
        s.meta["phantom_id"] = phantom_id
        s.meta["split"] = args.split
        if args.features == "pb":
            s.features = s.features[:, :7]
    write_dataset(args.out, Dataset(mesh, samples, {
        "kind": "dataset", "version": __version__, "phantom": spec.to_dict(),
        "phantom_id": phantom_id, "split": args.split, "seed": cfg.seed,
        "materials": cfg.materials.to_dict(), "displacement_scale": scale,
        "load_steps": sim.load_steps, "n_requested": stats["n_requested"],
        "n_samples": stats["n_samples"], "n_failed": stats["n_failed"],
        "failures": stats["failures"], "mean_displacement": stats["mean_displacement"],
        "max_displacement": stats["max_displacement"]}))
    print(f"simulate: {stats['n_samples']}/{n} solves, {stats['n_failed']} failed, mean |u| "
          f"{stats['mean_displacement'] * 1e3:.3f} mm, max {stats['max_displacement'] * 1e3:.3f} mm")
    return EXIT_OK


def _train_config(cfg: PipelineConfig, args):
    tc = cfg.training
    if getattr(args, "features", None):
        tc = dataclasses.replace(tc, feature_mode=args.features)
    if getattr(args, "epochs", None) is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    return tc


def _mode_samples(datasets, mode: str) -> list:
    from .training import TrainingError, select_mode
    try:
        return select_mode(_samples(datasets), mode)
    except TrainingError as exc:
        raise CompatibilityError(str(exc)) from None


def cmd_train(args) -> int:
    from .network import save_checkpoint
    from .training import train

    cfg = _config(args)
    tcfg = _train_config(cfg, args)
    train_ds = _read_datasets(args.data)
    val_ds = _read_datasets(args.val)
    tr = _mode_samples(train_ds, tcfg.feature_mode)
    va = _mode_samples(val_ds, tcfg.feature_mode)
    params, tlog = train(tr, tcfg, va, progress=lambda e: log.info(
        "epoch %d loss %.5g val_mae %s", e["epoch"], e["train_loss"], e["val_mae"]))
    out = Path(args.out)
    save_checkpoint(params, out / "model.bmck", extra=params.extra)
    atomic_write(out / "train_log.csv", tlog.to_csv().encode())
    write_json(out / "manifest.json", {
        "kind": "model", "version": __version__, "seed": cfg.seed,
        "training": tcfg.to_dict(), "network": params.config.to_dict(),
        "nonstandard_gfv": params.config.nonstandard_gfv,
        "training_phantoms": params.extra.get("training_phantoms", []),
        "train_data": [str(d) for d in args.data], "val_data": [str(d) for d in args.val or []],
        "best_epoch": tlog.best_epoch, "final_train_loss": tlog.epochs[-1]["train_loss"],
        "coverage": tlog.coverage, "timing": {"seconds": tlog.total_seconds}})
    best = tlog.epochs[tlog.best_epoch]
    print(f"train: {len(tlog.epochs)} epochs, best epoch {tlog.best_epoch} "
          f"(val MAE {best['val_mae']}) -> {out / 'model.bmck'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .inference import predict
    from .network import check_feature_mode, load_checkpoint

    cfg = _config(args)
    params = load_checkpoint(args.model)
    ds = read_dataset(args.data)
    inf = cfg.inference
    S = args.points_per_pass or inf.points_per_pass
    passes = args.passes if args.passes is not None else inf.passes
    indices = range(len(ds.samples)) if args.sample is None else [args.sample]
    out = Path(args.out)
    files = []
    timing = []
    for i in indices:
        sample = ds.samples[i]
        check_feature_mode(params, sample.features)
        res = predict(params, sample.features, S, passes, seed=cfg.seed + i)
        name = f"prediction_{i:05d}.bmpr"
        write_prediction(out / name, res.displacement, res.pass_counts, res.milliseconds)
        files.append({"file": name, "sample": i, "min_pass_count": int(res.pass_counts.min())})
        timing.append(res.milliseconds)
    write_json(out / "manifest.json", {
        "kind": "prediction", "version": __version__, "seed": cfg.seed, "model": str(args.model),
        "data": str(args.data), "points_per_pass": S, "passes": passes, "predictions": files,
        "timing": {"milliseconds": timing}})
    print(f"predict: {len(files)} predictions -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_holdout
    from .inference import benchmark_latency
    from .network import load_checkpoint

    cfg = _config(args)
    params = load_checkpoint(args.model)
    holdout = _read_datasets(args.data)
    for ds in holdout:
        if ds.samples and ds.samples[0].features.shape[1] < params.config.input_dim:
            raise CompatibilityError(
                f"network expects {params.feature_mode} features but {ds.phantom_id} holds "
                f"{ds.feature_mode} samples")
    inf = cfg.inference
    report = evaluate_holdout(params, holdout, cfg.tessellation, inf.points_per_pass, inf.passes,
                              cfg.seed)
    out = Path(args.out)
    atomic_write(out / "report.txt", (report.to_text() + "\n").encode())
    atomic_write(out / "report.csv", report.to_csv().encode())
    tests = {k: {"t": v.t, "p": v.p, "df": v.df, "degenerate": v.degenerate,
                 "construction": v.construction} for k, v in report.tests.items()}
    summary = {"kind": "evaluation", "version": __version__, "seed": cfg.seed,
               "model": str(args.model), "data": [str(d) for d in args.data],
               "rows": report.rows(), "tests": tests, "header": report.header,
               "case_mae": {b.name: b.case_mae for b in report.blocks}}
    write_json(out / "manifest.json", json.loads(json.dumps(summary, default=_nan_safe)))
    print(report.to_text())
    if args.latency:
        # wall-clock numbers live in their own file so the reports stay hash-stable
        feats = holdout[0].samples[0].features[:, :params.config.input_dim]
        lat = benchmark_latency(params, feats, inf.points_per_pass, inf.passes,
                                inf.latency_repeats, cfg.seed)
        write_json(out / "latency.json", {"timing": lat})
        print(f"latency: median {lat['median_ms']:.1f} ms, p95 {lat['p95_ms']:.1f} ms "
              f"({lat['n_points']} points)")
    return EXIT_OK


def _nan_safe(v):
    # numpy scalars and arrays that slipped into report dicts
    return v.tolist() if hasattr(v, "tolist") else str(v)


def cmd_ablate(args) -> int:
    from .training import ablation_run

    cfg = _config(args)
    tcfg = _train_config(cfg, args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if args.axis == "gfv":
        try:
            values = [int(v) for v in values]
        except ValueError:
            raise ConfigError(f"gfv values must be integers, got {args.values!r}") from None
    elif set(values) - {"pbk", "pb"}:
        raise ConfigError(f"materials values must be pbk/pb, got {args.values!r}")
    tr = _samples(_read_datasets(args.data))
    va = _samples(_read_datasets(args.val))
    ev = _samples(_read_datasets(args.eval))
    res = ablation_run(tr, va, ev, args.axis, values, tcfg)
    out = Path(args.out)
    atomic_write(out / "ablation.txt", (res.to_text() + "\n").encode())
    atomic_write(out / "ablation.csv", res.to_csv().encode())
    write_json(out / "manifest.json", {
        "kind": "ablation", "version": __version__, "seed": cfg.seed, "axis": args.axis,
        "values": values, "training": tcfg.to_dict(),
        "rows": [{k: v for k, v in r.items()} for r in res.rows]})
    print(res.to_text())
    return EXIT_OK


def cmd_verify_fe(args) -> int:
    from .verify import run_all

    t0 = time.process_time()
    results = run_all(args.backend)
    width = max(len(r[0]) for r in results)
    print(f"{'check':<{width}}  {'value':>11}  {'tolerance':>9}  result")
    for name, value, tol, ok, secs in results:
        print(f"{name:<{width}}  {value:>11.3e}  {tol:>9.0e}  {'PASS' if ok else 'FAIL'}")
    cpu = time.process_time() - t0
    print(f"cpu time {cpu:.2f} s")
    return EXIT_OK if all(r[3] for r in results) else EXIT_SIMULATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fesurrogate",
        description="Phantom meshes, FE datasets, point-network training and evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON pipeline configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("phantom", help="generate a phantom mesh")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("simulate", help="run FE simulations on a phantom")
    common(sp)
    sp.add_argument("--mesh", required=True, help="phantom directory")
    sp.add_argument("--n", type=int, help="number of simulations")
    sp.add_argument("--scale", type=float, help="probe displacement scale (m)")
    sp.add_argument("--split", default="train", choices=["train", "val", "holdout"])
    sp.add_argument("--phantom-id", type=int)
    sp.add_argument("--features", default="pbk", choices=["pbk", "pb"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a network")
    common(sp)
    sp.add_argument("--data", nargs="+", required=True, help="training dataset directories")
    sp.add_argument("--val", nargs="*", default=[], help="validation dataset directories")
    sp.add_argument("--features", choices=["pbk", "pb"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="bagged prediction for a dataset")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sample", type=int)
    sp.add_argument("--points-per-pass", type=int)
    sp.add_argument("--passes", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="holdout report (mesh nodes and tessellation)")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", nargs="+", required=True, help="holdout dataset directories")
    sp.add_argument("--latency", action="store_true", help="also benchmark inference latency")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="GFV or material-feature ablation")
    common(sp)
    sp.add_argument("--axis", required=True, choices=["gfv", "materials"])
    sp.add_argument("--values", required=True, help="comma separated, e.g. 256,512 or pbk,pb")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--val", nargs="*", default=[])
    sp.add_argument("--eval", nargs="+", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("verify-fe", help="run the FE solver oracle checks")
    sp.add_argument("--backend", choices=["cython", "python"])
    sp.set_defaults(func=cmd_verify_fe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError, GeometryError, EvaluationError,
            InferenceError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FESolverError as exc:
        print(f"simulation failure: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except CompatibilityError as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except Exception as exc:  # anything else is a bug or an unexpected state
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
