"""Command-line entry point.

User-facing subcommands: ``run``, ``analyze``, ``gantt``, ``scaling`` and
``prepare``.  ``server`` and ``runner`` are spawned by the launcher.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .config import WorkPaths, load_config
from .errors import ElasticPFError
from .trace import read_trace_dir


def _paths_for(cfg, work_dir: str | None) -> WorkPaths:
    return cfg.paths(work_dir)


def analyze_run(root: Path):
    """Build the metrics report for a finished run directory."""
    from .experiment import read_results
    from .metrics import build_report

    paths = WorkPaths(root)
    events = read_trace_dir(paths.trace)
    cfg = None
    if (root / "config.yaml").exists():
        cfg = load_config(root / "config.yaml")
    results = read_results(paths) if paths.results.exists() else {}
    kw = {}
    if cfg is not None:
        kw = dict(P=cfg.P, cycles=cfg.cycles, depth=cfg.depth, seed=cfg.seed,
                  multisets={t: r.multiset for t, r in results.items()},
                  source_multisets={t: r.source for t, r in results.items()}
                  if cfg.cache_capacity > 0 else None)
    return build_report(events, **kw), events, cfg


def _print_report(report) -> None:
    print(f"{'cycle':>5} {'Q':>5} {'R':>3} {'loads':>6} {'bound':>6} {'hits':>5} {'wall_s':>8}")
    for row in report.per_cycle:
        wall = row["wall_time_s"]
        print(f"{row['cycle']:>5} {row['Q']:>5} {row['runners']:>3} {row['global_loads']:>6} "
              f"{row['bound']:>6} {row['hits']:>5} {wall if wall is None else round(wall, 3):>8}")
    for k, v in report.whole_run.items():
        if k != "replay":
            print(f"{k}: {v if not isinstance(v, float) else round(v, 4)}")
    for v in report.violations:
        print(f"VIOLATION {v.name}: {v.detail}")


def cmd_run(args) -> int:
    from .launcher import Launcher
    from .metrics import export_gantt, gantt_rows

    cfg = load_config(args.config)
    paths = _paths_for(cfg, args.work_dir)
    if args.fresh and paths.root.exists():
        if not (paths.root / "prepared.json").exists():
            print(f"refusing to delete {paths.root}: not a run directory", file=sys.stderr)
            return 2
        shutil.rmtree(paths.root)
    report = Launcher(cfg, paths).run()
    print(f"launcher exit {report.exit_code} after {report.wall_time:.2f} s; "
          f"server starts {report.server_starts}, runner replacements "
          f"{report.runner_replacements}")
    if report.exit_code != 0:
        print(f"run failed: {report.reason or 'see logs'}", file=sys.stderr)
        return report.exit_code
    metrics, events, _ = analyze_run(paths.root)
    _print_report(metrics)
    metrics.write_csv(paths.results / "metrics.csv")
    metrics.write_json(paths.results / "metrics.json")
    if args.gantt:
        export_gantt(gantt_rows(events), args.gantt)
    if not metrics.ok:
        names = sorted({v.name for v in metrics.violations})
        print(f"invariant violated: {', '.join(names)}", file=sys.stderr)
        return 1
    return 0


def cmd_analyze(args) -> int:
    trace_dir = Path(args.trace_dir)
    root = trace_dir.parent if trace_dir.name == "trace" else trace_dir
    if (root / "trace").is_dir():
        report, _, _ = analyze_run(root)
    else:
        from .metrics import build_report
        report = build_report(read_trace_dir(trace_dir))
    _print_report(report)
    if args.csv:
        report.write_csv(args.csv)
    if args.json:
        report.write_json(args.json)
    if not report.ok:
        print(f"invariant violated: {', '.join(sorted({v.name for v in report.violations}))}",
              file=sys.stderr)
        return 1
    return 0


def cmd_gantt(args) -> int:
    from .metrics import export_gantt, gantt_rows

    rows = gantt_rows(read_trace_dir(args.trace_dir))
    export_gantt(rows, args.out)
    print(f"{len(rows)} rows written to {args.out}")
    return 0


def _run_info(trace_dir: Path) -> dict:
    root = trace_dir.parent if trace_dir.name == "trace" else trace_dir
    cfg = load_config(root / "config.yaml")
    return {"model": json.dumps(cfg.model.to_dict(), sort_keys=True), "P": cfg.P, "R": cfg.R}


def cmd_scaling(args) -> int:
    from .metrics import ScalingMismatchError, scaling_report

    dirs = [Path(d) for d in args.trace_dirs]
    ref = Path(args.reference)
    if ref not in dirs:
        dirs.insert(0, ref)
    runs = {str(d): (read_trace_dir(d), _run_info(d)) for d in dirs}
    try:
        rows = scaling_report(runs, str(ref))
    except ScalingMismatchError as exc:
        print(f"cannot compare: {exc}", file=sys.stderr)
        return 2
    header = "label,runners,particles_per_runner,mean_cycle_time_s,busy_fraction,weak_efficiency"
    lines = [header] + [f"{r.label},{r.runners},{r.particles_per_runner:g},{r.mean_cycle_time:.6f},"
                        f"{'' if r.busy_fraction is None else f'{r.busy_fraction:.4f}'},"
                        f"{r.weak_efficiency:.4f}" for r in rows]
    print("\n".join(lines))
    if args.csv:
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return 0


def cmd_prepare(args) -> int:
    from .experiment import prepare

    cfg = load_config(args.config)
    paths = prepare(cfg, _paths_for(cfg, args.work_dir))
    print(f"prepared {paths.root}")
    return 0


def cmd_server(args) -> int:
    from .server import serve

    root = Path(args.work_dir)
    cfg = load_config(root / "config.yaml")
    return serve(cfg, WorkPaths(root), restore=args.restore, epoch_ns=args.epoch,
                 incarnation=args.incarnation)


def cmd_runner(args) -> int:
    from .runner import RunnerConfig, main

    root = Path(args.work_dir)
    cfg = load_config(root / "config.yaml")
    rc = RunnerConfig(args.id, args.server, cfg, WorkPaths(root), args.epoch,
                      cfg.runner_failures)
    return main(rc)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elasticpf", description="Elastic particle-filter runtime")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run an experiment end to end and analyze its trace")
    s.add_argument("config")
    s.add_argument("--work-dir")
    s.add_argument("--gantt", help="also write the Gantt CSV here")
    s.add_argument("--fresh", action="store_true", help="delete an existing run directory first")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("analyze", help="metrics and invariant checks for a trace directory")
    s.add_argument("trace_dir")
    s.add_argument("--csv")
    s.add_argument("--json")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("gantt", help="export one CSV row per propagation")
    s.add_argument("trace_dir")
    s.add_argument("out")
    s.set_defaults(fn=cmd_gantt)

    s = sub.add_parser("scaling", help="compare runs against a reference run")
    s.add_argument("trace_dirs", nargs="+")
    s.add_argument("--reference", required=True)
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_scaling)

    s = sub.add_parser("prepare", help="write observations and the initial ensemble")
    s.add_argument("config")
    s.add_argument("--work-dir")
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("server", help=argparse.SUPPRESS)
    s.add_argument("--work-dir", required=True)
    s.add_argument("--epoch", type=int)
    s.add_argument("--incarnation", type=int, default=0)
    s.add_argument("--restore", action="store_true")
    s.set_defaults(fn=cmd_server)

    s = sub.add_parser("runner", help=argparse.SUPPRESS)
    s.add_argument("--work-dir", required=True)
    s.add_argument("--id", type=int, required=True)
    s.add_argument("--server", required=True)
    s.add_argument("--epoch", type=int)
    s.set_defaults(fn=cmd_runner)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ElasticPFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
