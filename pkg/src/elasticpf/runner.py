"""Runner process: propagates many particles in sequence without restarting.

Three threads cooperate:

* the model worker (main thread) takes assignments in order, pins the parent
  from the local cache, propagates, weights and caches the child, then hands
  "stage" and "send weight" items to the helper;
* the helper worker performs every global-store access (stage, fetch,
  prefetch, observation load), talks eviction with the server and forwards a
  weight only after its state is staged;
* a reader thread decodes server messages and routes them.

Exit codes: 0 after SHUTDOWN, 1 on a fatal error, 2 when the server vanishes.
"""

from __future__ import annotations

import collections
import os
import queue
import sys
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import models
from . import protocol as pr
from .config import ExperimentConfig, RunnerFailure, WorkPaths
from .errors import ElasticPFError, ProtocolViolation
from .experiment import load_observation
from .filtering import likelihood
from .rng import task_seed
from .store import GlobalStore, LocalCache, ParticleId, Prefetcher, stage_to_global
from .trace import Clock, TraceWriter

EXIT_OK, EXIT_FATAL, EXIT_SERVER_LOST = 0, 1, 2


@dataclass
class RunnerConfig:
    runner_id: int
    server: str
    experiment: ExperimentConfig
    paths: WorkPaths
    epoch_ns: int | None = None
    failures: tuple[RunnerFailure, ...] = ()


class _Stop(Exception):
    pass


class Runner:
    def __init__(self, rc: RunnerConfig):
        self.rc = rc
        self.cfg = cfg = rc.experiment
        self.rid = rc.runner_id
        self.entity = f"runner-{self.rid}"
        self.trace = TraceWriter(rc.paths.trace / f"{self.entity}.jsonl", self.entity,
                                 Clock(rc.epoch_ns))
        self.retain = cfg.cache_capacity > 0
        # without a cache the runner still needs room for its working set
        capacity = cfg.cache_capacity if self.retain else 2 * cfg.depth + 1
        self.cache = LocalCache(capacity, self.trace, max_overflow=3)
        self.store = GlobalStore(rc.paths.store)
        self.prefetcher = Prefetcher(self.cache, self.store, self.trace)
        self.conn: pr.Connection | None = None

        self.lock = threading.Condition()
        self.assignments: collections.deque = collections.deque()
        self.current: pr.Assign | None = None
        self.control: collections.deque = collections.deque()   # from the reader
        self.work: collections.deque = collections.deque()      # from the model worker
        self.observations: dict[int, np.ndarray] = {}
        self.obs_requested: set[int] = set()
        self.directives: queue.Queue = queue.Queue()
        self.exhausted: set[int] = set()
        self.started_in_cycle: collections.Counter = collections.Counter()
        self.stop_code: int | None = None
        self.hung = False
        self.helper_error: BaseException | None = None

    # lifecycle ----------------------------------------------------------

    def run(self) -> int:
        cfg = self.cfg
        self.trace.record("process-start", None, pid=os.getpid())
        try:
            self.conn = pr.Connection.connect(self.rc.server, self.entity,
                                              timeout=cfg.timeouts.startup)
        except OSError as exc:
            self.trace.record("process-exit", None, code=EXIT_SERVER_LOST, error=str(exc))
            return EXIT_SERVER_LOST
        self.conn.send(pr.Join(self.rid, cfg.cache_capacity))
        if cfg.fuzz_protocol and self.rid == 0:
            self.trace.record("failure-injected", None, mode="malformed-frame")
            self.conn.send_raw(b"\x00\x00\x00\x05\x07\x03zzz")
        self.conn.send(pr.RequestWork(self.rid))
        threading.Thread(target=self._reader, daemon=True, name="reader").start()
        threading.Thread(target=self._helper, daemon=True, name="helper").start()
        try:
            self._model_loop()
        except _Stop:
            pass
        except ElasticPFError as exc:
            self.trace.record("process-exit", None, code=EXIT_FATAL, error=repr(exc))
            return self._exit(EXIT_FATAL)
        code = self.stop_code if self.stop_code is not None else EXIT_FATAL
        return self._exit(code)

    def _exit(self, code: int) -> int:
        self.trace.record("process-exit", None, code=code, hits=self.cache.hits,
                          misses=self.cache.misses, peak=self.cache.peak)
        self.trace.close()
        if self.conn is not None:
            self.conn.close()
        return code

    def _stop(self, code: int) -> None:
        with self.lock:
            if self.stop_code is None:
                self.stop_code = code
            self.lock.notify_all()

    def _freeze(self) -> None:
        while True:
            time.sleep(3600)

    def _check(self) -> None:
        if self.hung:
            self._freeze()
        if self.stop_code is not None:
            raise _Stop()
        if self.helper_error is not None:
            raise self.helper_error

    def _crash(self, failure: RunnerFailure, where: str) -> None:
        self.trace.record("failure-injected", None, mode=failure.mode, cycle=failure.cycle,
                          task=failure.task, where=where)
        if failure.mode == "crash":
            self.trace.close()
            os._exit(9)
        self.hung = True  # keep the socket open but never answer again
        self._freeze()

    def _failure_for(self, cycle: int, task) -> RunnerFailure | None:
        for f in self.rc.failures:
            if f.runner == self.rid and f.cycle == cycle and f.task == task:
                return f
        return None

    # reader ---------------------------------------------------------------

    def _reader(self) -> None:
        while True:
            try:
                msg = self.conn.recv()
            except (OSError, pr.DecodeError, pr.VersionError, pr.FrameError) as exc:
                self.trace.record("protocol-error", None, error=repr(exc))
                msg = None
            if self.hung:
                self._freeze()
            if msg is None:
                self._stop(EXIT_SERVER_LOST)
                return
            if isinstance(msg, pr.Shutdown):
                self.trace.record("runner-retire", None, reason=msg.reason)
                self._stop(EXIT_OK)
                return
            if isinstance(msg, pr.Assign):
                self._on_assign(msg)
            elif isinstance(msg, pr.PrefetchHint):
                self._post_control(("prefetch", ParticleId(*msg.parent)))
            elif isinstance(msg, pr.CancelPrefetch):
                self._on_cancel(ParticleId(*msg.parent))
            elif isinstance(msg, pr.EvictDirective):
                self.directives.put(msg.id)
            elif isinstance(msg, pr.CycleExhausted):
                self._on_exhausted(msg.cycle)
            else:
                self.trace.record("protocol-error", None, reason=f"unexpected {type(msg).__name__}")

    def _on_assign(self, a: pr.Assign) -> None:
        cycle = a.child.cycle
        self.trace.record("assign", a.child, cycle=cycle, parent=list(a.parent),
                          task=a.task_index)
        with self.lock:
            if cycle not in self.obs_requested:
                self.obs_requested.add(cycle)
                self.control.append(("obs", cycle))
            self.assignments.append(a)
            self.lock.notify_all()

    def _on_cancel(self, parent: ParticleId) -> None:
        with self.lock:
            victim = next((a for a in reversed(self.assignments) if a.parent == parent), None)
            if victim is not None:
                self.assignments.remove(victim)
                self.control.append(("cancel", parent))
                self.lock.notify_all()
        self.conn.send(pr.CancelAck(self.rid, parent, victim is not None))

    def _on_exhausted(self, cycle: int) -> None:
        self.exhausted.add(cycle)
        f = self._failure_for(cycle, "last")
        if f is not None:
            self._crash(f, "cycle-exhausted")

    def _post_control(self, item) -> None:
        with self.lock:
            self.control.append(item)
            self.lock.notify_all()

    # model worker -----------------------------------------------------------

    def _next_assignment(self) -> pr.Assign:
        with self.lock:
            while not self.assignments:
                self._check()
                self.lock.wait(0.5)
            self._check()
            a = self.assignments.popleft()
            self.current = a
            return a

    def _model_loop(self) -> None:
        cfg = self.cfg
        noise = cfg.noise
        while True:
            a = self._next_assignment()
            cycle, k = a.child.cycle, a.task_index
            n = self.started_in_cycle[cycle]
            self.started_in_cycle[cycle] += 1
            f = self._failure_for(cycle, n)
            if f is not None:
                self._crash(f, "task-start")
            parent = ParticleId(*a.parent)
            x = self._acquire(parent, a)
            y = self._observation(cycle)
            if cfg.model.deterministic and a.siblings > 1 and cfg.perturbation > 0:
                x = models.perturb(x, cfg.perturbation, a.perturb_seed)
            self.trace.record("propagate-start", a.child, cycle=cycle, parent=list(parent))
            child_state = models.propagate(x, cfg.model, task_seed(cfg.seed, cycle, k),
                                           realtime=cfg.realtime)
            w = likelihood(models.observe(child_state, cfg.observation), y, noise)
            self.trace.record("propagate-end", a.child, cycle=cycle, parent=list(parent))
            self.cache.unpin(parent)
            self.cache.put(a.child, child_state, transient=True)
            with self.lock:
                self.current = None
                while len(self.work) >= cfg.helper_queue:
                    self.trace.record("backpressure", a.child, depth=len(self.work))
                    self.lock.wait(0.5)
                    self._check()
                self.work.append(("stage", ParticleId(*a.child)))
                self.work.append(("weight", ParticleId(*a.child), w))
                needed = {b.parent for b in self.assignments}
                self.lock.notify_all()
            if not self.retain and parent not in needed:
                try:
                    self.cache.discard(parent)
                except ProtocolViolation:
                    pass

    def _acquire(self, parent: ParticleId, a: pr.Assign) -> np.ndarray:
        state, hit = self.cache.acquire(parent)
        cyc = a.child.cycle
        self.trace.record("cache-hit" if hit else "cache-miss", a.child, cycle=cyc,
                          parent=list(parent))
        if state is not None:
            return state
        self._post_control(("fetch", parent, cyc))
        while not self.cache.wait_for(parent, 0.5):
            self._check()
        return self.cache.pin_loaded(parent)

    def _observation(self, cycle: int) -> np.ndarray:
        with self.lock:
            while cycle not in self.observations:
                self._check()
                self.lock.wait(0.5)
            return self.observations[cycle]

    # helper worker ------------------------------------------------------------

    def _helper(self) -> None:
        try:
            while True:
                if self.hung:
                    self._freeze()
                with self.lock:
                    while not self.control and not self.work and self.stop_code is None:
                        self.lock.wait(0.5)
                    if self.stop_code is not None:
                        return
                    item = self.control.popleft() if self.control else self.work.popleft()
                    self.lock.notify_all()
                self._do(item)
        except BaseException as exc:  # surfaces in the model worker
            self.trace.record("protocol-error", None, error=repr(exc), where="helper")
            self.helper_error = exc if isinstance(exc, ElasticPFError) else \
                ElasticPFError(f"helper failed: {exc!r}")
            with self.lock:
                self.lock.notify_all()

    def _do(self, item) -> None:
        kind = item[0]
        if kind == "obs":
            cycle = item[1]
            self.trace.record("observation-load", None, cycle=cycle)
            y = load_observation(self.rc.paths, cycle)
            with self.lock:
                self.observations[cycle] = y
                for old in [c for c in self.observations if c < cycle - 1]:
                    del self.observations[old]
                self.lock.notify_all()
        elif kind == "stage":
            stage_to_global(self.cache, item[1], self.store, self.trace)
        elif kind == "weight":
            child, w = item[1], item[2]
            if not self.retain:
                try:
                    self.cache.discard(child)
                except ProtocolViolation:
                    pass
            added, removed = self.cache.take_delta()
            self.trace.record("weight-send", child, cycle=child.cycle, weight=w)
            self.conn.send(pr.Weight(self.rid, child, w, tuple(added), tuple(removed)))
            self._make_room(limit=self.cache.capacity)
        elif kind == "prefetch":
            parent = item[1]
            if parent in self.cache or not self._still_needed(parent):
                return
            h = self.prefetcher.prefetch(parent)
            if h.done.is_set():
                return
            self._make_room(limit=self.cache.capacity - 1)
            self.prefetcher.execute(h, transient=True)
        elif kind == "fetch":
            parent, cycle = item[1], item[2]
            if parent in self.cache:
                return
            h = self.prefetcher.pending(parent)
            self._make_room(limit=self.cache.capacity - 1)
            if h is not None:
                self.prefetcher.execute(h, transient=True)
                if parent in self.cache:
                    return
            self.trace.record("global-load-start", parent, cycle=cycle, prefetch=False)
            state = self.store.load(parent)
            self.trace.record("global-load-end", parent, cycle=cycle, prefetch=False)
            self.cache.put(parent, state, persisted=True, fresh_load=True, transient=True)
        elif kind == "cancel":
            parent = item[1]
            h = self.prefetcher.handles.get(parent)
            if h is not None and not self._still_needed(parent):
                self.prefetcher.cancel(h)

    def _still_needed(self, parent: ParticleId) -> bool:
        with self.lock:
            if self.current is not None and ParticleId(*self.current.parent) == parent:
                return True
            return any(ParticleId(*a.parent) == parent for a in self.assignments)

    def _make_room(self, limit: int) -> None:
        """Ask the server for evictions until at most ``limit`` entries remain."""
        if not self.retain:
            return
        while len(self.cache) > limit:
            added, removed = self.cache.take_delta()
            self.conn.send(pr.EvictRequest(self.rid, tuple(added), tuple(removed)))
            while True:
                try:
                    victim = self.directives.get(timeout=0.5)
                    break
                except queue.Empty:
                    if self.stop_code is not None:
                        raise _Stop() from None
            if victim is None:
                return
            try:
                self.cache.evict(victim)
            except (KeyError, ProtocolViolation) as exc:
                self.trace.record("protocol-error", victim, reason=f"eviction refused: {exc}")
                return


def main(rc: RunnerConfig) -> int:
    return Runner(rc).run()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(EXIT_FATAL)
