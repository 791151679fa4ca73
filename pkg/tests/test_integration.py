"""End-to-end runs through real processes."""

from __future__ import annotations

import json
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from elasticpf.cli import main as cli_main
from elasticpf.config import RunnerFailure, dump_config, load_config
from elasticpf.experiment import read_results, run_direct
from elasticpf.launcher import EXIT_ABORTED, Launcher
from elasticpf.models import ModelSpec
from elasticpf.trace import read_trace_dir

ROOT = Path(__file__).parent.parent
CONFIGS = ROOT / "configs"


def cli(*args, timeout=120):
    return subprocess.run([sys.executable, "-m", "elasticpf", *map(str, args)], cwd=ROOT,
                          capture_output=True, text=True, timeout=timeout)


def events_named(events, name, entity=None):
    return [e for e in events if e.event == name and (entity is None or e.entity == entity)]


def test_smoke_cli(tmp_path):
    t0 = time.monotonic()
    out = cli("run", CONFIGS / "smoke.yaml", "--work-dir", tmp_path / "run",
              "--gantt", tmp_path / "gantt.csv")
    assert out.returncode == 0, out.stderr
    assert time.monotonic() - t0 < 30
    assert (tmp_path / "run" / "results" / "metrics.csv").exists()
    assert (tmp_path / "gantt.csv").read_text().count("\n") == 16 * 5 + 1
    events = read_trace_dir(tmp_path / "run" / "trace")
    spawns = events_named(events, "spawn", "launcher")
    assert sum(s.extra["role"] == "server" for s in spawns) == 1
    assert sum(s.extra["role"] == "runner" for s in spawns) == 4
    cfg = load_config(CONFIGS / "smoke.yaml")
    direct = run_direct(cfg)
    live = read_results(cfg.paths(tmp_path / "run"))
    assert all(live[t].multiset == direct.results[t].multiset for t in range(1, 6))
    assert all(live[t].weights == direct.results[t].weights for t in range(1, 6))

    # the analysis subcommands work on the finished run
    assert cli_main(["analyze", str(tmp_path / "run" / "trace"), "--json",
                     str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["violations"] == []
    assert cli_main(["gantt", str(tmp_path / "run" / "trace"), str(tmp_path / "g2.csv")]) == 0
    assert cli_main(["scaling", str(tmp_path / "run" / "trace"),
                     "--reference", str(tmp_path / "run" / "trace")]) == 0


def test_fuzzing_flag_fails_with_named_violation(tmp_path):
    cfg = load_config(CONFIGS / "smoke.yaml").with_overrides(fuzz_protocol=True)
    dump_config(cfg, tmp_path / "fuzz.yaml")
    out = cli("run", tmp_path / "fuzz.yaml", "--work-dir", tmp_path / "run")
    assert out.returncode == 1
    assert "protocol-integrity" in out.stderr


def test_invalid_config_spawns_nothing(tmp_path):
    (tmp_path / "bad.yaml").write_text("P: 4\nR: 1\ncycles: 1\nmodel: {kind: nope}\n")
    out = cli("run", tmp_path / "bad.yaml", "--work-dir", tmp_path / "run")
    assert out.returncode == 2
    assert "unknown model kind" in out.stderr
    assert not (tmp_path / "run").exists()


def test_restart_storm_aborts(tmp_path):
    cfg = load_config(CONFIGS / "smoke.yaml").with_overrides(
        runner_failures=tuple(RunnerFailure(r, 1, 0) for r in range(6)), max_restarts=2)
    report = Launcher(cfg, cfg.paths(tmp_path / "run")).run()
    assert report.exit_code == EXIT_ABORTED
    assert "restarts" in report.reason


def test_hang_detected_by_timeout(tmp_path):
    cfg = load_config(CONFIGS / "fault_runner.yaml").with_overrides(
        runner_failures=(RunnerFailure(1, 2, 1, "hang"),), cycles=3)
    report = Launcher(cfg, cfg.paths(tmp_path / "run")).run()
    assert report.exit_code == 0
    events = read_trace_dir(tmp_path / "run" / "trace")
    lost = events_named(events, "runner-lost", "server")
    assert [e.extra["reason"] for e in lost if e.extra.get("runner") == 1] == ["timeout"]
    assert events_named(events, "kill", "launcher")


def test_launcher_kill_stops_server_with_checkpoint(tmp_path):
    base = load_config(CONFIGS / "fault_runner.yaml")
    slow = ModelSpec("synthetic-delay", 2, 0.5, {"base_ms": 150, "jitter_ms": 5})
    cfg = base.with_overrides(runner_failures=(), cycles=6, P=16, R=4, model=slow)
    dump_config(cfg, tmp_path / "c.yaml")
    run = tmp_path / "run"
    proc = subprocess.Popen([sys.executable, "-m", "elasticpf", "run", str(tmp_path / "c.yaml"),
                             "--work-dir", str(run)], cwd=ROOT, stdout=subprocess.DEVNULL,
                            stderr=subprocess.DEVNULL)
    try:
        deadline = time.monotonic() + 60
        while not (run / "results" / "cycle_1.json").exists():
            assert time.monotonic() < deadline and proc.poll() is None
            time.sleep(0.05)
        proc.send_signal(signal.SIGKILL)
        proc.wait()
        deadline = time.monotonic() + 30
        while True:
            events = read_trace_dir(run / "trace")
            exits = {e.entity for e in events if e.event == "process-exit"}
            runners = {e.entity for e in events if e.entity.startswith("runner-")}
            if "server" in exits and runners <= exits:
                break
            assert time.monotonic() < deadline, f"still alive: {runners - exits}"
            time.sleep(0.2)
    finally:
        if proc.poll() is None:
            proc.kill()
    server_exit = [e for e in events if e.entity == "server" and e.event == "process-exit"]
    assert server_exit[-1].extra["code"] == 3
    assert (run / "checkpoint" / "snapshot.json").exists()
    assert not (run / "results" / "complete.json").exists()

    # relaunching resumes from that checkpoint and finishes with identical numbers
    report = Launcher(cfg, cfg.paths(run)).run()
    assert report.exit_code == 0
    direct = run_direct(cfg)
    live = read_results(cfg.paths(run))
    assert all(live[t].multiset == direct.results[t].multiset for t in range(1, cfg.cycles + 1))
