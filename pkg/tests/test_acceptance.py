"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``;
the summary lines are printed at the end of the session.
"""

from __future__ import annotations

import math
import random
import socket
import struct
import subprocess
import sys
import time
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
import pytest

from elasticpf import protocol as pr
from elasticpf.cli import analyze_run
from elasticpf.config import WorkPaths, dump_config, from_dict, load_config
from elasticpf.errors import ProtocolError
from elasticpf.experiment import posterior_means, prepare, read_results, truth_and_observations
from elasticpf.filtering import normalize, resample
from elasticpf.launcher import Launcher
from elasticpf.metrics import check_ordering, scaling_report
from elasticpf.models import kalman_oracle
from elasticpf.sim import random_multiset, replay_loads
from elasticpf.trace import read_trace_dir

sys.path.insert(0, str(Path(__file__).parent))
from messages import random_messages  # noqa: E402

ROOT = Path(__file__).parent.parent
CONFIGS = ROOT / "configs"

ORACLE_CONFIG = {
    "name": "kalman-oracle", "P": 5000, "R": 4, "cycles": 20, "seed": 2024,
    "model": {"kind": "linear-gaussian", "d_x": 1, "process_noise_sigma": 0.3,
              "params": {"a": 0.95}},
    "observation": {"operator": {"kind": "identity"}, "sigma": 0.5},
    "prior": {"mean": 0.0, "std": 1.0},
    "truth": {"x0": [1.0]},
    "cache": {"capacity": 64, "lookahead": 1},
    "timeouts": {"propagation": 10.0, "heartbeat_period": 0.5, "heartbeat_misses": 10,
                 "startup": 60.0},
}


class LiveRun:
    def __init__(self, cfg, root: Path):
        self.cfg, self.paths = cfg, cfg.paths(root)
        t0 = time.monotonic()
        self.launch = Launcher(cfg, self.paths).run()
        self.elapsed = time.monotonic() - t0
        self.report, self.events, _ = analyze_run(self.paths.root)
        self.results = read_results(self.paths)

    def accepts(self):
        return [e for e in self.events if e.entity == "server" and e.event == "weight-accept"]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Lazily executed live runs, shared between criteria."""
    cache: dict[str, LiveRun] = {}
    base = tmp_path_factory.mktemp("acceptance")

    def get(name: str, cfg) -> LiveRun:
        if name not in cache:
            cache[name] = LiveRun(cfg, base / name)
        return cache[name]
    return get


def oracle_run(runs):
    return runs("oracle", from_dict(ORACLE_CONFIG))


def cache_runs(runs):
    cfg = load_config(CONFIGS / "cache.yaml")
    return [runs(f"cache-{s}", cfg.with_overrides(seed=s)) for s in range(1, 6)]


def fault_runner_run(runs):
    return runs("fault-runner", load_config(CONFIGS / "fault_runner.yaml"))


def fault_server_run(runs):
    return runs("fault-server", load_config(CONFIGS / "fault_server.yaml"))


def elastic_run(runs):
    return runs("elastic", load_config(CONFIGS / "elastic.yaml"))


def multisets(run: LiveRun):
    return {t: r.multiset for t, r in sorted(run.results.items())}


# 1 ----------------------------------------------------------------------------------

def test_criterion_1_kalman_oracle(runs, acceptance):
    run = oracle_run(runs)
    cfg = run.cfg
    assert run.launch.exit_code == 0
    truth, obs = truth_and_observations(cfg)
    exact = kalman_oracle(cfg.model, cfg.obs_sigma, obs, cfg.prior_mean, cfg.prior_std ** 2)
    means = posterior_means(run.paths, run.results)
    err2 = tol2 = 0.0
    for t, (m, v) in enumerate(exact, start=1):
        err2 += (float(means[t][0]) - m) ** 2
        tol2 += v / run.results[t].ess
    n = len(exact)
    rmse, tol = math.sqrt(err2 / n), 3 * math.sqrt(tol2 / n)
    ok = rmse <= tol and rmse <= 0.1 and run.elapsed < 60
    acceptance(1, ok, f"rmse {rmse:.4f} (tol {tol:.4f}, abs 0.1), runtime {run.elapsed:.1f} s "
                      f"(limit 60 s)")
    assert rmse <= tol and rmse <= 0.1, "posterior mean off the exact filter"
    assert run.elapsed < 60, f"live run took {run.elapsed:.1f} s"


# 2 ----------------------------------------------------------------------------------

def test_criterion_2_load_bound(acceptance):
    rng = random.Random(2)
    t0 = time.monotonic()
    bad, single_bad = [], []
    for i in range(200):
        P = rng.randint(16, 256)
        R = rng.choice([d for d in range(1, P + 1) if P % d == 0 and d <= 64])
        ms = random_multiset(P, seed=i)
        loads = replay_loads(ms, R, seed=i)
        if loads > ms.Q + R - 1:
            bad.append((P, R, ms.Q, loads))
        if replay_loads(ms, 1, seed=i) != ms.Q:
            single_bad.append((P, ms.Q))
    elapsed = time.monotonic() - t0
    ok = not bad and not single_bad and elapsed < 300
    acceptance(2, ok, f"{200 - len(bad)}/200 within Q+R-1, R=1 exact in "
                      f"{200 - len(single_bad)}/200, {elapsed:.1f} s")
    assert not bad and not single_bad and elapsed < 300


# 3 ----------------------------------------------------------------------------------

def test_criterion_3_cache_hit_ratio(runs, acceptance):
    t0 = time.monotonic()
    rows = []
    for run in cache_runs(runs):
        assert run.launch.exit_code == 0
        replay = run.report.whole_run["replay"]
        rows.append((run.cfg.seed, run.report.whole_run["cache_hit_ratio"],
                     all(r["ok"] for r in replay), len(replay)))
    elapsed = time.monotonic() - t0
    ok = all(h >= 0.80 and r for _, h, r, _ in rows) and elapsed < 300
    acceptance(3, ok, ", ".join(f"seed {s}: {h:.3f}{'' if r else ' replay-exceeded'}"
                                for s, h, r, _ in rows) + f"; {elapsed:.0f} s")
    assert all(r for _, _, r, _ in rows), "cached run loaded more than its replay"
    assert all(h >= 0.80 for _, h, _, _ in rows), "hit ratio below 0.80"
    assert elapsed < 300


# 5 ----------------------------------------------------------------------------------

def uninterrupted(runs, run: LiveRun, name: str) -> LiveRun:
    cfg = run.cfg.with_overrides(runner_failures=(), server_kills=())
    return runs(name, cfg)


def test_criterion_5_runner_faults(runs, acceptance):
    run = fault_runner_run(runs)
    ref = uninterrupted(runs, run, "fault-runner-clean")
    per_cycle = Counter(e.particle[0] for e in run.accepts())
    crashes = [e for e in run.events if e.event == "failure-injected"]
    exact_p = all(per_cycle[t] == run.cfg.P for t in range(1, run.cfg.cycles + 1))
    same = multisets(run) == multisets(ref)
    ok = run.launch.exit_code == 0 and exact_p and same and len(crashes) == 2 and run.elapsed < 180
    acceptance(5, ok, f"exit {run.launch.exit_code}, {len(crashes)} crashes, P accepts per cycle "
                      f"{exact_p}, multisets identical {same}, {run.elapsed:.1f} s")
    assert ok


# 6 ----------------------------------------------------------------------------------

def test_criterion_6_server_fault(runs, acceptance):
    run = fault_server_run(runs)
    ref = uninterrupted(runs, run, "fault-server-clean")
    restored = [e for e in run.events if e.entity == "server" and e.event == "restore"]
    accepted = Counter(e.particle for e in run.accepts())
    dupes = [p for p, n in accepted.items() if n > 1]
    # tasks accepted before the crash must not be propagated again afterwards
    cut = restored[0].ts if restored else None
    before = {e.particle for e in run.accepts() if cut is not None and e.ts < cut}
    repeated = {e.particle for e in run.events
                if e.event == "propagate-start" and cut is not None and e.ts > cut
                and e.particle in before}
    same = multisets(run) == multisets(ref)
    ok = run.launch.exit_code == 0 and len(restored) >= 1 and not dupes and not repeated and same
    acceptance(6, ok, f"exit {run.launch.exit_code}, {run.launch.server_starts} server starts, "
                      f"{len(before)} pre-crash accepts, {len(dupes)} duplicate accepts, "
                      f"{len(repeated)} re-propagated, multisets identical {same}")
    assert ok


# 7 ----------------------------------------------------------------------------------

def test_criterion_7_elasticity(runs, acceptance):
    run = elastic_run(runs)
    cfg = run.cfg
    per_cycle = defaultdict(list)
    for e in run.accepts():
        per_cycle[e.particle[0]].append(e.particle[1])
    exactly_once = all(sorted(per_cycle[t]) == list(range(cfg.P))
                       for t in range(1, cfg.cycles + 1))
    joins = {e.extra["runner"]: e.extra["cycle"] for e in run.events
             if e.entity == "server" and e.event == "runner-join"}
    first = {}
    for e in run.events:
        if e.entity == "server" and e.event == "assign":
            first.setdefault(e.extra["runner"], e.extra["cycle"])
    late = {r: (c, first.get(r)) for r, c in joins.items()
            if c < cfg.cycles and (first.get(r) is None or first[r] > max(c, 1) + 1)}
    sizes = [e.extra["target"] for e in run.events if e.event == "elasticity"]
    ok = run.launch.exit_code == 0 and exactly_once and not late and sizes == [6, 3]
    acceptance(7, ok, f"exit {run.launch.exit_code}, scaled to {sizes}, exactly-once "
                      f"{exactly_once}, {len(joins)} joins, late starters {late or 'none'}")
    assert ok


# 8 ----------------------------------------------------------------------------------

def test_criterion_8_multinomial(acceptance):
    t0 = time.monotonic()
    P = 100
    w = normalize(np.random.default_rng(8).gamma(0.5, size=P))
    total = np.zeros(P)
    for seed in range(10_000):
        ms = resample(w, seed)
        np.add.at(total, list(ms.parents), list(ms.counts))
    mean = total / 10_000 / P
    se = np.sqrt(w * (1 - w) / P / 10_000)
    z = np.abs(mean - w) / np.where(se > 0, se, 1.0)
    elapsed = time.monotonic() - t0
    ok = bool(np.all(z <= 4)) and elapsed < 30
    acceptance(8, ok, f"max |z| {z.max():.2f} (limit 4), {elapsed:.1f} s")
    assert ok


# 9 ----------------------------------------------------------------------------------

def test_criterion_9_weak_scaling(runs, acceptance):
    t0 = time.monotonic()
    scaled = [runs(f"scaling-r{r}", load_config(CONFIGS / f"scaling_r{r}.yaml"))
              for r in (4, 8, 16)]
    assert all(s.launch.exit_code == 0 for s in scaled)
    info = {str(s.paths.trace): (s.events, {"model": repr(s.cfg.model.to_dict()), "P": s.cfg.P,
                                            "R": s.cfg.R}) for s in scaled}
    rows = scaling_report(info, str(scaled[0].paths.trace))
    inflation = rows[-1].mean_cycle_time / rows[0].mean_cycle_time - 1
    busy = [r.busy_fraction for r in rows]
    elapsed = time.monotonic() - t0
    ok = inflation <= 0.15 and all(b is not None and b >= 0.85 for b in busy) and elapsed < 600
    acceptance(9, ok, f"cycle time {', '.join(f'R={r.runners}: {r.mean_cycle_time:.3f} s' for r in rows)}"
                      f"; inflation {inflation:.1%}; busy {', '.join(f'{b:.3f}' for b in busy)}")
    assert ok


# 10 ---------------------------------------------------------------------------------

def _malformed(rng: random.Random, msgs: list) -> bytes:
    """A frame whose payload cannot decode, or a length prefix out of range."""
    while True:
        kind = rng.randrange(4)
        if kind == 0:
            return struct.pack(">I", pr.MAX_FRAME + 1 + rng.randrange(1 << 20))
        if kind == 1:
            payload = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 64)))
        else:
            payload = bytearray(pr.encode(rng.choice(msgs)))
            if kind == 2:
                for _ in range(rng.randint(1, 4)):
                    payload[rng.randrange(len(payload))] ^= 1 << rng.randrange(8)
            else:
                del payload[rng.randrange(len(payload)):]
                payload += b"\xff" * rng.randrange(3)
            payload = bytes(payload)
        if not payload:
            continue
        try:
            pr.decode(payload)
        except ProtocolError:
            return struct.pack(">I", len(payload)) + payload


def test_criterion_10_protocol(tmp_path, acceptance):
    failures = 0
    n = 100_000
    for msg in random_messages(n, seed=10):
        try:
            if pr.decode(pr.encode(msg)) != msg:
                failures += 1
        except ProtocolError:
            failures += 1

    cfg = load_config(CONFIGS / "smoke.yaml")
    paths = prepare(cfg, WorkPaths(tmp_path / "srv"))
    dump_config(cfg, paths.root / "config.yaml")
    server = subprocess.Popen([sys.executable, "-m", "elasticpf", "server", "--work-dir",
                               str(paths.root)], cwd=ROOT, stdout=subprocess.DEVNULL,
                              stderr=subprocess.DEVNULL)
    rng = random.Random(10)
    msgs = list(random_messages(500, seed=11))
    frames, not_closed = 2000, 0
    try:
        deadline = time.monotonic() + 30
        while not paths.address_file.exists():
            assert time.monotonic() < deadline and server.poll() is None
            time.sleep(0.02)
        address = paths.address_file.read_text().strip()
        launcher = pr.Connection.connect(address, "launcher")
        for i in range(frames):
            conn = pr.Connection.connect(address)
            conn.send_raw(_malformed(rng, msgs))
            try:
                conn.sock.settimeout(5)
                while conn.sock.recv(65536):
                    pass
            except ConnectionResetError:
                pass
            except socket.timeout:
                not_closed += 1
            conn.close()
            if i % 200 == 0:
                launcher.send(pr.Heartbeat(i))
        launcher.send(pr.Heartbeat(frames))
        echo = launcher.recv(timeout=5)
        while isinstance(echo, pr.Heartbeat) and echo.sequence != frames:
            echo = launcher.recv(timeout=5)
        alive = server.poll() is None and echo is not None
        launcher.close()
    finally:
        server.kill()
        server.wait()
    errors = [e for e in read_trace_dir(paths.trace)
              if e.event == "protocol-error" and e.extra.get("error") is not None]
    typed = Counter(e.extra["error"] for e in errors)
    ok = failures == 0 and alive and not_closed == 0 and len(errors) == frames
    acceptance(10, ok, f"{n} round-trips, {failures} failures; {frames} malformed frames, "
                       f"server alive {alive}, rejections {dict(typed)}")
    assert ok


# 4 ----------------------------------------------------------------------------------
# Last, so it can reuse the traces of the other live criteria.

def test_criterion_4_stage_before_accept(runs, acceptance):
    traced = [oracle_run(runs), *cache_runs(runs), fault_runner_run(runs), fault_server_run(runs),
              elastic_run(runs)]
    accepted = violations = 0
    for run in traced:
        accepted += len(run.accepts())
        violations += len(check_ordering(run.events))
    ok = violations == 0 and accepted > 0
    acceptance(4, ok, f"{accepted} accepted weights over {len(traced)} runs, "
                      f"{violations} without an earlier stage-end")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
