from __future__ import annotations

import json
import time

import pytest

from elasticpf import protocol as pr
from elasticpf.config import ExperimentConfig, Timeouts, WorkPaths
from elasticpf.errors import CheckpointError
from elasticpf.experiment import end_cycle, read_results, run_direct
from elasticpf.filtering import ResampleMultiset
from elasticpf.models import ModelSpec
from elasticpf.server import EXIT_DEGENERATE, EXIT_LAUNCHER_LOST, EXIT_OK, ServerCore
from elasticpf.trace import MemoryTrace

LAUNCHER_CONN = 100


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def make_cfg(P=8, R=2, cycles=3, **kw):
    model = ModelSpec("linear-gaussian", 1, 0.3, {"a": 0.95})
    kw.setdefault("timeouts", Timeouts(propagation=2.0, heartbeat_period=0.5, heartbeat_misses=4))
    return ExperimentConfig(P=P, R=R, cycles=cycles, model=model, obs_sigma=0.5, seed=5,
                            cache_capacity=4, **kw)


class Harness:
    """Drives a ServerCore the way runners would, with scripted weights."""

    def __init__(self, cfg, root, weight=None, restore=False, clock=None):
        self.cfg = cfg
        self.paths = WorkPaths(root)
        self.trace = MemoryTrace("server")
        self.clock = clock or FakeClock()
        self.core = ServerCore(cfg, self.paths, self.trace, restore=restore, clock=self.clock)
        self.weight = weight or (lambda t, k: 1.0)
        self.inbox: dict[int, list] = {}
        self.closed: set[int] = set()

    def send(self, conn, msg):
        for c, m in self.core.handle(conn, msg):
            if m is None:
                self.closed.add(c)
            else:
                self.inbox.setdefault(c, []).append(m)

    def tick(self):
        for c, m in self.core.tick():
            if m is None:
                self.closed.add(c)
            else:
                self.inbox.setdefault(c, []).append(m)

    def join(self, rid):
        self.send(rid, pr.Join(rid, 4))
        self.send(rid, pr.RequestWork(rid))

    def take(self, conn, cls):
        got = [m for m in self.inbox.get(conn, []) if isinstance(m, cls)]
        self.inbox[conn] = [m for m in self.inbox.get(conn, []) if not isinstance(m, cls)]
        return got

    def finish_one(self, rid):
        """Complete the oldest assignment held by ``rid``; False if none."""
        book = self.core.sched.runners.get(rid)
        if book is None or not book.in_flight:
            return False
        a = book.in_flight[0]
        self.send(rid, pr.Weight(rid, a.child, self.weight(a.child.cycle, a.task_index)))
        return True

    def run_until_done(self, rids, limit=10_000):
        for _ in range(limit):
            if self.core.exit_code is not None:
                return
            if not any(self.finish_one(r) for r in rids):
                for r in rids:
                    if r in self.core.runners:
                        self.send(r, pr.RequestWork(r))
        assert self.core.exit_code is not None


def events(h, name):
    return [e for e in h.trace.events if e.event == name]


@pytest.fixture
def cfg():
    return make_cfg()


def test_full_run_matches_direct(tmp_path):
    cfg = make_cfg(P=12, R=3, cycles=4)
    direct = run_direct(cfg)
    h = Harness(cfg, tmp_path, weight=lambda t, k: direct.results[t].weights[k])
    for r in range(3):
        h.join(r)
    h.run_until_done(range(3))
    assert h.core.exit_code == EXIT_OK
    res = read_results(h.paths)
    assert [res[t].multiset for t in range(1, 5)] == [direct.results[t].multiset for t in range(1, 5)]
    assert h.paths.complete_marker.exists()
    assert all(isinstance(m, pr.Shutdown) for m in h.inbox[0][-1:])


def test_pth_weight_starts_next_cycle(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    assert len(h.take(0, pr.Assign)) == cfg.depth
    for _ in range(cfg.P):
        h.finish_one(0)
    assert h.core.cycle == 2
    assert h.paths.cycle_result(1).exists()
    assert all(a.child.cycle == 2 for a in h.take(0, pr.Assign)[-cfg.depth:])


def test_weight_from_deregistered_runner(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    h.join(1)
    a = h.core.sched.runners[1].in_flight[0]
    h.core.on_disconnect(1)
    h.send(1, pr.Weight(1, a.child, 1.0))
    rej = events(h, "weight-reject")
    assert rej and rej[-1].extra["reason"] == "unregistered"
    assert 1 not in h.closed
    assert a.task_index not in h.core.sched.accepted


def test_join_mid_cycle_gets_work(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    h.finish_one(0)
    h.join(1)
    assert h.take(1, pr.Assign)


def test_duplicate_join_rejected(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    h.send(7, pr.Join(0, 4))
    assert 7 in h.closed


def test_foreign_weight_is_violation(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    h.join(1)
    a = h.core.sched.runners[0].in_flight[0]
    h.send(1, pr.Weight(1, a.child, 1.0))
    assert 1 in h.closed
    assert events(h, "protocol-error")


def test_negative_weight_is_violation(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    a = h.core.sched.runners[0].in_flight[0]
    h.send(0, pr.Weight(0, a.child, -1.0))
    assert 0 in h.closed


def test_timeouts(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.send(LAUNCHER_CONN, pr.Heartbeat(1, sender="launcher"))
    for r in range(3):
        h.join(r)
    h.clock.t = 1.0
    h.send(2, pr.Heartbeat(1))
    h.tick()
    assert not h.closed
    h.clock.t = 2.5
    h.send(LAUNCHER_CONN, pr.Heartbeat(2, sender="launcher"))
    h.tick()
    assert h.closed == {0, 1}
    kills = h.take(LAUNCHER_CONN, pr.KillRunner)
    assert sorted(k.runner_id for k in kills) == [0, 1]
    h.run_until_done([2])
    assert h.core.exit_code == EXIT_OK


def test_launcher_heartbeat(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.send(LAUNCHER_CONN, pr.Heartbeat(4, sender="launcher"))
    assert h.take(LAUNCHER_CONN, pr.Heartbeat)[0].sequence == 4
    h.clock.t = 1.9
    h.tick()
    assert h.core.exit_code is None
    h.clock.t = 2.1
    h.tick()
    assert h.core.exit_code == EXIT_LAUNCHER_LOST
    assert (h.paths.checkpoint / "snapshot.json").exists()


def test_checkpoint_restore_round_trip(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    for _ in range(cfg.P + 3):
        h.finish_one(0)
    h.core.checkpoint()
    h.finish_one(0)  # journal only
    done = sorted(h.core.sched.accepted)
    h2 = Harness(cfg, tmp_path, restore=True)
    assert h2.core.cycle == 2
    assert sorted(h2.core.sched.accepted) == done
    restore = events(h2, "restore")[0]
    assert restore.extra["from_journal"] == 1


def test_restore_then_finish_matches_uninterrupted(tmp_path):
    cfg = make_cfg(P=10, R=2, cycles=3)
    direct = run_direct(cfg)
    w = lambda t, k: direct.results[t].weights[k]
    h = Harness(cfg, tmp_path / "a", weight=w)
    h.join(0)
    for _ in range(14):
        h.finish_one(0)
    h2 = Harness(cfg, tmp_path / "a", weight=w, restore=True)
    h2.join(5)
    h2.run_until_done([5])
    res = read_results(h2.paths)
    assert [res[t].multiset for t in (1, 2, 3)] == [direct.results[t].multiset for t in (1, 2, 3)]
    # nothing accepted before the restore was propagated again
    before = {e.particle for e in events(h, "weight-accept")}
    after = {e.particle for e in events(h2, "weight-accept")}
    assert not before & after


def test_restore_refuses_other_config(tmp_path, cfg):
    Harness(cfg, tmp_path)
    with pytest.raises(CheckpointError):
        Harness(cfg.with_overrides(seed=99), tmp_path, restore=True)


def test_restore_without_snapshot(tmp_path, cfg):
    with pytest.raises(CheckpointError):
        Harness(cfg, tmp_path, restore=True)


def test_degenerate_weights_abort(tmp_path, cfg):
    h = Harness(cfg, tmp_path, weight=lambda t, k: 0.0)
    h.join(0)
    h.run_until_done([0])
    assert h.core.exit_code == EXIT_DEGENERATE
    assert "degenerate" in json.loads((h.paths.results / "failed.json").read_text())["error"]


def test_concentrated_weights_single_parent(tmp_path, cfg):
    h = Harness(cfg, tmp_path, weight=lambda t, k: 1.0 if k == 3 else 0.0)
    h.join(0)
    for _ in range(cfg.P):
        h.finish_one(0)
    assert h.core.cycle == 2
    (entry,) = h.core.sched.entries.values()
    assert entry.parent.index == 3 and entry.total == cfg.P


def test_retire(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.send(LAUNCHER_CONN, pr.Heartbeat(1, sender="launcher"))
    h.join(0)
    h.join(1)
    h.send(LAUNCHER_CONN, pr.RetireRunner(1))
    assert 1 in h.core.runners
    while h.finish_one(1):
        pass
    assert 1 not in h.core.runners
    assert h.take(1, pr.Shutdown)
    h.run_until_done([0])
    assert h.core.exit_code == EXIT_OK


def test_retire_from_runner_is_violation(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    h.send(0, pr.RetireRunner(0))
    assert 0 in h.closed


def test_eviction_request(tmp_path, cfg):
    h = Harness(cfg, tmp_path)
    h.join(0)
    h.send(0, pr.EvictRequest(0, ((0, 5), (0, 6)), ()))
    (d,) = h.take(0, pr.EvictDirective)
    assert d.id is not None


def test_resampling_time_at_large_P():
    P = 2555
    w = [1.0 + (k % 7) for k in range(P)]
    t0 = time.perf_counter()
    res = end_cycle(1, w, ResampleMultiset.identity(P), 3)
    assert time.perf_counter() - t0 < 0.1
    assert res.multiset.P == P
