"""Command line: ``drmor <subcommand> --config run.ini [--out DIR] ...``.

Artifacts go to ``<out>/<experiment>/<stage>/`` together with a
``manifest.json``.  Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, RunConfig, parse_config, serialize, with_overrides
from .dynsys import IntegrationError, NewtonError
from .fileio import (CsvTable, atomic_write, read_csv, read_deim_operator, read_drrnn_model,
                     read_manifest, read_pod_basis, read_trajectory_csv, write_csv,
                     write_deim_operator, write_drrnn_model, write_history_csv, write_manifest,
                     write_pod_basis, write_singular_values_csv, write_trajectory_csv)
from .training import TrainingError
from .uq import EnsembleResult, kde_estimate, kde_l1_distance, shared_grid

log = logging.getLogger("drmor")

THREADS_ENV = "DRMOR_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4
SUBCOMMANDS = ("fom-run", "pod-build", "deim-build", "rom-run", "drrnn-train", "drrnn-run",
               "uq-report", "stability-check")
MSE_HEADER = ["method", "rank_or_layers", "mse_train", "mse_test"]


class MissingArtifact(FileNotFoundError):
    pass


class Context:
    def __init__(self, cfg: RunConfig, threads: int):
        self.cfg = cfg
        self.threads = threads
        self.root = Path(cfg.out_dir) / cfg.experiment

    def stage(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def require(self, name: str, filename: str = "manifest.json") -> Path:
        path = self.root / name / filename
        if not path.exists():
            raise MissingArtifact(f"missing artifact {path}; run `{name}` first")
        return path


# FOM ensemble I/O --------------------------------------------------------------

def _write_probe(path, samples, values, idx):
    header = ["sample_id"] + [f"param_{k}" for k in range(samples.shape[1])] + ["value"]
    rows = [[int(i)] + [float(v) for v in samples[i]] + [float(values[j])]
            for j, i in enumerate(idx)]
    return write_csv(CsvTable(header, rows), path)


def _load_fom(ctx: Context) -> EnsembleResult:
    fom_dir = ctx.require("fom-run").parent
    man = read_manifest(fom_dir)
    samples_path = ctx.require("fom-run", "samples.csv")
    table = read_csv(samples_path)
    samples = np.array([row[1:] for row in table.rows], dtype=float)
    trajs = [None] * len(samples)
    for entry in man["outputs"]:
        name = Path(entry["path"]).name
        if name.startswith("run_"):
            trajs[int(name[4:9])] = read_trajectory_csv(fom_dir / entry["path"])
    failures = {int(k): v for k, v in man.get("meta", {}).get("failures", {}).items()}
    return EnsembleResult(samples, trajs, failures)


def _workspace(ctx: Context, reduced: bool) -> ex.Workspace:
    fom = _load_fom(ctx)
    ws = ex.Workspace(ctx.cfg, fom.samples, fom)
    if reduced:
        ws.basis = read_pod_basis(ctx.require("pod-build", "basis.morb"))
        if ctx.cfg.problem == "P5":
            ws.deim = read_deim_operator(ctx.require("deim-build", "deim.morb"))
    return ws


def _merge_mse(path: Path, method: str, key, train: float, test: float):
    rows = []
    if path.exists():
        rows = [r for r in read_csv(path).rows if not (r[0] == method and str(r[1]) == str(key))]
    rows.append([method, key, float(train), float(test)])
    rows.sort(key=lambda r: (str(r[0]), str(r[1])))
    return write_csv(CsvTable(MSE_HEADER, rows), path)


# stages ----------------------------------------------------------------------

def cmd_fom_run(ctx: Context) -> int:
    cfg = ctx.cfg
    out = ctx.stage("fom-run")
    samples = ex.parameter_samples(cfg)
    res = ex.run_fom(cfg, samples, ctx.threads)
    header = ["sample_id"] + [f"param_{k}" for k in range(samples.shape[1])]
    paths = [write_csv(CsvTable(header, [[i] + list(map(float, s)) for i, s in enumerate(samples)]),
                       out / "samples.csv")]
    runs = out / "runs"
    for i, traj in enumerate(res.trajectories):
        if traj is not None:
            paths.append(write_trajectory_csv(traj, runs / f"run_{i:05d}.csv"))
    atomic_write(out / "config.ini", serialize(cfg))
    write_manifest(out, "fom-run", outputs=paths, seed=cfg.seed,
                   extra={"failures": {str(k): v for k, v in res.failures.items()},
                          "problem": cfg.problem})
    print(f"fom-run: {len(res) - len(res.failures)} of {len(res)} runs written to {runs}")
    return EXIT_OK if not res.failures else EXIT_NUMERIC


def cmd_pod_build(ctx: Context) -> int:
    cfg = ctx.cfg
    fom = _load_fom(ctx)
    train_idx, _ = ex.split(cfg)
    basis = ex.pod_from_fom(fom, train_idx, cfg.rank)
    out = ctx.stage("pod-build")
    paths = [write_pod_basis(basis, out / "basis.morb"),
             write_singular_values_csv(basis, out / "singular_values.csv")]
    write_manifest(out, "pod-build", inputs=[ctx.require("fom-run")], outputs=paths,
                   seed=cfg.seed, extra={"rank": cfg.rank})
    print(f"pod-build: rank {basis.r} basis from {len(train_idx)} runs")
    return EXIT_OK


def cmd_deim_build(ctx: Context) -> int:
    cfg = ctx.cfg
    if cfg.problem != "P5":
        raise ConfigError("deim-build applies to the two-phase problem (P5) only", key="id")
    fom = _load_fom(ctx)
    basis = read_pod_basis(ctx.require("pod-build", "basis.morb"))
    train_idx, _ = ex.split(cfg)
    op = ex.deim_from_fom(cfg, fom, train_idx, basis, cfg.deim_m)
    out = ctx.stage("deim-build")
    paths = [write_deim_operator(op, out / "deim.morb")]
    write_manifest(out, "deim-build", inputs=[ctx.require("pod-build", "basis.morb")],
                   outputs=paths, seed=cfg.seed,
                   extra={"m": op.m, "indices": op.indices.tolist(), "condition": op.condition})
    print(f"deim-build: m = {op.m}, cond(P^T V) = {op.condition:.3e}")
    return EXIT_OK


def cmd_rom_run(ctx: Context) -> int:
    cfg = ctx.cfg
    fom = _load_fom(ctx)
    basis = read_pod_basis(ctx.require("pod-build", "basis.morb"))
    methods = [("pod", None)]
    deim_path = ctx.root / "deim-build" / "deim.morb"
    if cfg.problem == "P5" and deim_path.exists():
        methods.append(("pod-deim", read_deim_operator(deim_path)))
    out = ctx.stage("rom-run")
    train_idx, test_idx = ex.split(cfg)
    ref = fom.stacked()
    var, tj, label = ex.probe_location(cfg)
    status = EXIT_OK
    written = []
    for method, deim in methods:
        res, _ = ex.run_rom(cfg, fom.samples, basis, deim, ctx.threads)
        if res.failures:
            status = EXIT_NUMERIC
        pred = res.stacked()
        ok = ~np.isnan(pred).any(axis=(1, 2)) & ~np.isnan(ref).any(axis=(1, 2))
        tr = [i for i in train_idx if ok[i]]
        te = [i for i in test_idx if ok[i]]
        m_tr = ex.trajectory_mse(pred[tr], ref[tr]) if tr else float("nan")
        m_te = ex.trajectory_mse(pred[te], ref[te]) if te else float("nan")
        written.append(_merge_mse(out / "mse.csv", method, basis.r, m_tr, m_te))
        idx = np.flatnonzero(ok)
        written.append(_write_probe(out / f"probe_{method}_r{basis.r}.csv", fom.samples,
                                    pred[idx, tj, var], idx))
        print(f"rom-run: {method} r={basis.r} mse train {m_tr:.3e} test {m_te:.3e}")
    write_manifest(out, "rom-run", inputs=[ctx.require("pod-build", "basis.morb")],
                   outputs=sorted(set(written)), seed=cfg.seed, extra={"probe": label})
    return status


def _model_name(cfg: RunConfig) -> str:
    return f"K{cfg.layers}_x{cfg.dt_multiplier}"


def cmd_drrnn_train(ctx: Context) -> int:
    cfg = ctx.cfg
    reduced = cfg.problem in ("P4", "P5")
    ws = _workspace(ctx, reduced)
    model, history = ex.fit_drrnn(ws, multiplier=cfg.dt_multiplier)
    out = ctx.stage("drrnn-train")
    name = _model_name(cfg)
    paths = [write_drrnn_model(model, out / f"model_{name}.drnn"),
             write_history_csv(history, out / f"history_{name}.csv")]
    write_manifest(out, "drrnn-train", inputs=[ctx.require("fom-run")], outputs=paths,
                   seed=cfg.seed, extra={"layers": cfg.layers, "dt_multiplier": cfg.dt_multiplier})
    print(f"drrnn-train: {name} final train mse {history.train_mse[-1]:.3e} "
          f"test mse {history.test_mse[-1]:.3e}")
    return EXIT_OK


def cmd_drrnn_run(ctx: Context) -> int:
    cfg = ctx.cfg
    reduced = cfg.problem in ("P4", "P5")
    ws = _workspace(ctx, reduced)
    name = _model_name(cfg)
    model = read_drrnn_model(ctx.require("drrnn-train", f"model_{name}.drnn"))
    mult = cfg.dt_multiplier
    pred = ex.drrnn_predict(ws, model, np.arange(len(ws.samples)), mult)
    ref = ws.fom.stacked()[:, ::mult]
    train_idx, test_idx = ex.split(cfg)
    m_tr = ex.trajectory_mse(pred[train_idx], ref[train_idx]) if len(train_idx) else float("nan")
    m_te = ex.trajectory_mse(pred[test_idx], ref[test_idx]) if len(test_idx) else float("nan")
    out = ctx.stage("drrnn-run")
    var, tj, label = ex.probe_location(cfg, mult)
    idx = np.arange(len(ws.samples))
    paths = [_merge_mse(out / "mse.csv", f"drrnn_x{mult}", model.K, m_tr, m_te),
             _write_probe(out / f"probe_drrnn_{name}.csv", ws.samples, pred[:, tj, var], idx)]
    write_manifest(out, "drrnn-run", inputs=[ctx.require("drrnn-train", f"model_{name}.drnn")],
                   outputs=paths, seed=cfg.seed, extra={"probe": label})
    print(f"drrnn-run: {name} mse train {m_tr:.3e} test {m_te:.3e}")
    return EXIT_OK


def cmd_uq_report(ctx: Context) -> int:
    cfg = ctx.cfg
    fom = _load_fom(ctx)
    var, tj, label = ex.probe_location(cfg)
    ref = fom.probe(var, tj)
    sources = {}
    for stage in ("rom-run", "drrnn-run"):
        for path in sorted((ctx.root / stage).glob("probe_*.csv")):
            sources[path.stem[len("probe_"):]] = np.array(read_csv(path).column("value"), dtype=float)
    out = ctx.stage("uq-report")
    grid = shared_grid([ref] + list(sources.values()))
    ref_kde = kde_estimate(ref, grid)
    paths = []
    rows = []
    for name, vals in [("fom", ref)] + list(sources.items()):
        kde = kde_estimate(vals, grid)
        paths.append(write_csv(CsvTable(["x", "density"], [[float(x), float(d)] for x, d in
                                                            zip(kde.grid, kde.density)]),
                               out / f"kde_{name}.csv"))
        if name != "fom":
            rows.append([name, kde_l1_distance(kde, ref_kde)])
    paths.append(write_csv(CsvTable(["method", "l1_to_fom"], rows), out / "kde_distance.csv"))
    write_manifest(out, "uq-report", inputs=[ctx.require("fom-run")], outputs=paths,
                   seed=cfg.seed, extra={"probe": label})
    for name, d in rows:
        print(f"uq-report: {label} {name} L1 distance to FOM = {d:.4f}")
    return EXIT_OK


def cmd_stability_check(ctx: Context) -> int:
    rep = ex.stability_report(ctx.cfg)
    print(f"stability bound (phi = {rep['reference_porosity']}): dt <= {rep['bound']:.6g}")
    print(f"bound over porosity range: [{rep['bound_min']:.6g}, {rep['bound_max']:.6g}]")
    print(f"configured dt = {rep['dt']:.6g} ({'violates' if rep['violated'] else 'satisfies'} the bound)")
    return EXIT_OK


COMMANDS = {
    "fom-run": cmd_fom_run,
    "pod-build": cmd_pod_build,
    "deim-build": cmd_deim_build,
    "rom-run": cmd_rom_run,
    "drrnn-train": cmd_drrnn_train,
    "drrnn-run": cmd_drrnn_run,
    "uq-report": cmd_uq_report,
    "stability-check": cmd_stability_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drmor", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="INI configuration file")
    p.add_argument("--out", help="output root (overrides [output] dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--rank", type=int)
    p.add_argument("--deim-m", type=int, dest="deim_m")
    p.add_argument("--layers", type=int)
    p.add_argument("--dt-multiplier", type=int, dest="dt_multiplier")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def dispatch(subcommand: str, cfg: RunConfig, threads: int = 1) -> int:
    """Run one pipeline stage and map failures to exit codes."""
    try:
        return COMMANDS[subcommand](Context(cfg, threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (IntegrationError, NewtonError, TrainingError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get(THREADS_ENV, "0")) or None
        cfg = parse_config(args.config)
        cfg = with_overrides(cfg, out_dir=args.out, seed=args.seed, threads=threads,
                             rank=args.rank, deim_m=args.deim_m, layers=args.layers,
                             dt_multiplier=args.dt_multiplier)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {THREADS_ENV}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.subcommand, cfg, cfg.threads)


if __name__ == "__main__":
    sys.exit(main())
