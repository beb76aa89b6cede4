"""Command-line entry point.

Subcommands cover the pipeline end to end: data generation, graph
construction, training, detection, evaluation, regularisation-path
analysis, the scalability sweep, and the graph-design ablation.  All
diagnostics go to stderr; results are files in --out (or stdout where
noted).  Exit codes: 0 success, 1 validation/config error, 2 solver
failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .data import write_dataset_csv, write_incidents_csv, write_series_csv
from .engine import SolverConfig, admm_solve, load_snapshot, save_snapshot
from .errors import InvalidInputError, SolverFailureError
from .graph import write_graph_csv, write_profiles_csv
from .harness import (
    ExperimentConfig,
    RunReport,
    apply_overrides,
    emit_report,
    lambda_path_analysis,
    load_config,
    prepare_run,
    run_comparison,
    run_ablation,
    scalability_sweep,
    sweep_summary,
)
from .metrics import PredictionSeries
from .ocsvm import ModelParams

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_SOLVER = 2
EXIT_IO = 3


def _log(quiet):
    def emit(msg):
        if not quiet:
            print(msg, file=sys.stderr)
    return emit


def _load_cfg(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    workers = args.workers
    if workers is None:
        env = os.environ.get("NETLASSO_AID_WORKERS")
        if env is not None:
            try:
                workers = int(env)
            except ValueError as err:
                raise InvalidInputError(f"NETLASSO_AID_WORKERS={env!r}: {err}") from err
    if workers is not None:
        cfg = replace(cfg, workers=workers)
    return cfg


def cmd_generate(args, log):
    cfg = _load_cfg(args)
    from .data import generate_synthetic

    gen = replace(cfg.generator, seed=cfg.seed)
    series, incidents = generate_synthetic(gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(out / "series.csv", series)
    write_incidents_csv(out / "incidents.csv", incidents, gen.timestep_minutes)
    log(f"wrote {out/'series.csv'} ({sum(len(s) for s in series)} rows) "
        f"and {out/'incidents.csv'} ({len(incidents)} incidents)")
    return EXIT_OK


def cmd_graph(args, log):
    cfg = _load_cfg(args)
    prepared = prepare_run(cfg, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .graph import ablation_variant
    from .harness import chain_adjacency, default_profiles

    profiles = default_profiles(cfg, prepared.node_ids, cfg.generator.assignment())
    adjacency = chain_adjacency(prepared.node_ids)
    fused = ablation_variant(cfg.graph_variant, prepared.node_ids, adjacency, profiles, cfg.tau)
    write_graph_csv(out / "graph.csv", fused)
    write_profiles_csv(out / "profiles.csv", profiles)
    log(f"wrote {out/'graph.csv'} ({len(fused.edges)} edges, variant {cfg.graph_variant})")
    return EXIT_OK


def cmd_train(args, log):
    cfg = _load_cfg(args)
    prepared = prepare_run(cfg, cfg.seed)
    models, states, trace = admm_solve(prepared.graph, cfg.solver, workers=cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(out / "solution.txt", models, states)
    write_dataset_csv(out / "test_windows.csv", prepared.test)
    log(f"trained {len(models)} node models at lambda={cfg.solver.lam:g}: "
        f"{trace.iterations} iterations, {trace.termination}")
    log(f"wrote {out/'solution.txt'} and {out/'test_windows.csv'}")
    return EXIT_OK


def cmd_detect(args, log):
    cfg = _load_cfg(args)
    if not args.snapshot:
        raise InvalidInputError("detect requires --snapshot from a train run")
    models, _states = load_snapshot(args.snapshot)
    prepared = prepare_run(cfg, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    import csv as _csv
    import numpy as np

    thr = harness._thresholds(cfg, models, prepared.val_data)
    path = out / "detections.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "end_index", "score", "flag"])
        for nid in prepared.node_ids:
            ends, X, _labels = prepared.test.for_node(nid)
            m = models[nid]
            scores = m.b - X @ m.w
            flags = scores >= thr[nid]
            for e, s, f in zip(ends, scores, flags):
                writer.writerow([nid, int(e), repr(float(s)), "true" if f else "false"])
    log(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args, log):
    cfg = _load_cfg(args)
    report = run_comparison(cfg, log=log)
    emit_report(report, args.out, run_id="evaluate")
    log(f"wrote report to {args.out}")
    return EXIT_OK


def cmd_path(args, log):
    cfg = _load_cfg(args)
    rows, selected = lambda_path_analysis(cfg, log=log)
    report = RunReport(config=cfg, path_rows=rows, selected_lambda=selected)
    emit_report(report, args.out, run_id="path")
    log(f"selected lambda {selected:g}; wrote report to {args.out}")
    return EXIT_OK


def cmd_sweep(args, log):
    cfg = _load_cfg(args)
    report = scalability_sweep(cfg, log=log)
    emit_report(report, args.out, run_id="sweep")
    for row in sweep_summary(report):
        log(f"scale {row['scale']}: f1={row['f1']:.3f} "
            f"median wall {row['median_wall_seconds']:.2f}s "
            f"median iterations {row['median_iterations']:.0f}")
    log(f"wrote report to {args.out}")
    return EXIT_OK


def cmd_ablate(args, log):
    cfg = _load_cfg(args)
    report = run_ablation(cfg, log=log)
    emit_report(report, args.out, run_id="ablate")
    log(f"wrote report to {args.out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "graph": cmd_graph,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "path": cmd_path,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netlasso-aid",
        description="Decentralised traffic incident detection via graph-coupled one-class SVMs.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    descriptions = {
        "generate": "write synthetic series.csv and incidents.csv",
        "graph": "build and export the coupling graph",
        "train": "run the coupled solver and export the solution snapshot",
        "detect": "score test windows with a trained snapshot",
        "evaluate": "local / centralised / coupled comparison with reports",
        "path": "regularisation-path analysis over the lambda grid",
        "sweep": "scalability sweep over nested node subsets",
        "ablate": "road-only vs geo-only vs fused graph comparison",
    }
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=descriptions[name], description=descriptions[name])
        p.add_argument("--config", metavar="PATH", help="JSON experiment config")
        p.add_argument("--out", metavar="DIR", default="out", help="output directory")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       help="override a config key (dotted path), repeatable")
        p.add_argument("--workers", type=int, default=None,
                       help="solver worker threads (default: NETLASSO_AID_WORKERS or 1)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--quiet", action="store_true", help="suppress progress on stderr")
        p.add_argument("--verbose", action="store_true", help="keep progress on stderr (default)")
        if name == "detect":
            p.add_argument("--snapshot", metavar="PATH", help="solution snapshot from train")
        p.set_defaults(func=fn)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    log = _log(args.quiet)
    try:
        return args.func(args, log)
    except InvalidInputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except SolverFailureError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
