"""Discrete-event replay of the runner protocol on a virtual clock.

The simulator drives the real :class:`~elasticpf.scheduler.Scheduler` with
simulated runners that follow the same protocol as live runner processes:
one assignment running plus ``lookahead`` queued, prefetch of queued parents,
stage-before-weight, cache deltas piggybacked on weights, and server-directed
eviction.  Durations are virtual, so thousands of instances run in seconds.
It is the oracle for the load-bound properties and the no-cache replay
comparison, and it emits the same trace vocabulary as the live system.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .filtering import ResampleMultiset, normalize, resample
from .rng import Stream, derive_seed, generator
from .scheduler import Assignment, Scheduler
from .store import ParticleId
from .trace import MemoryTrace, TraceWriter

NS = 1_000_000_000


@dataclass
class SimRunner:
    rid: int
    capacity: int
    queue: list = field(default_factory=list)
    busy: bool = False
    cache: dict = field(default_factory=dict)  # ParticleId -> "own" | "loaded"
    reported: set = field(default_factory=set)
    alive: bool = True
    loads: int = 0
    hits: int = 0
    busy_time: float = 0.0

    @property
    def retain(self) -> bool:
        return self.capacity > 0


@dataclass
class CycleStats:
    cycle: int
    Q: int
    R: int
    loads: int = 0
    hits: int = 0
    start: float = 0.0
    end: float = 0.0

    @property
    def bound(self) -> int:
        return self.Q + self.R - 1


class Simulation:
    """Virtual-time replay of one or more assimilation cycles.

    ``duration(assignment, runner_id)`` gives the propagation time in
    seconds; ``weight(assignment)`` the unnormalised weight of the child.
    """

    def __init__(self, P: int, R: int, *, capacity: int = 0, lookahead: int = 1,
                 duration: Callable[[Assignment, int], float] | float = 1.0,
                 weight: Callable[[Assignment], float] | None = None,
                 seed: int = 0, stage_time: float = 0.0, load_time: float = 0.0,
                 latency: float = 1e-6, trace: TraceWriter | None = None):
        self.P, self.seed = P, seed
        self.lookahead = lookahead
        self.capacity = capacity
        self.stage_time, self.load_time = stage_time, load_time
        self.latency = latency
        self._duration = duration
        self._weight = weight or (lambda a: 1.0)
        self.trace = trace if trace is not None else MemoryTrace("server")
        self.sched = Scheduler(P, seed, trace=_EntityTrace(self.trace, "server", self))
        self.runners: dict[int, SimRunner] = {}
        self.now = 0.0
        self._events: list = []
        self._seq = 0
        self.cycles: list[CycleStats] = []
        self.multisets: list[ResampleMultiset] = []
        self.request_log: list[tuple[int, int]] = []
        self.final_cycle = 0
        for rid in range(R):
            self.add_runner(rid)

    # plumbing ----------------------------------------------------------

    def _ts(self) -> int:
        return int(round(self.now * NS))

    def rec(self, entity: str, event: str, particle=None, **extra):
        self.trace.record(event, particle, entity=entity, ts=self._ts(), **extra)

    def _at(self, t: float, fn, *args):
        heapq.heappush(self._events, (t, self._seq, fn, args))
        self._seq += 1

    def duration(self, a: Assignment, rid: int) -> float:
        d = self._duration
        return d(a, rid) if callable(d) else float(d)

    def add_runner(self, rid: int) -> None:
        self.runners[rid] = SimRunner(rid, self.capacity)
        self.sched.register(rid)
        self.rec("server", "runner-join", None, runner=rid, cycle=self.sched.cycle)

    def kill_runner(self, rid: int) -> None:
        r = self.runners[rid]
        r.alive = False
        self.sched.on_runner_lost(rid)
        for other in self.runners.values():
            if other.alive and not other.queue and not other.busy:
                self._request(other)

    # protocol ----------------------------------------------------------

    def _request(self, r: SimRunner) -> None:
        """Server side of a work request: top the runner up to its depth."""
        while r.alive and len(r.queue) < 1 + self.lookahead:
            a = self.sched.next_task(r.rid)
            if a is None:
                break
            self.request_log.append((self.sched.cycle, r.rid))
            r.queue.append(a)
            if a.parent not in r.cache and len(r.queue) > 1:
                self._load(r, a.parent, prefetch=True)
        self._maybe_start(r)

    def _load(self, r: SimRunner, pid: ParticleId, prefetch: bool) -> None:
        ent = f"runner-{r.rid}"
        cyc = self.sched.cycle
        self.rec(ent, "global-load-start", pid, cycle=cyc, prefetch=prefetch)
        self.rec(ent, "global-load-end", pid, cycle=cyc, prefetch=prefetch)
        r.loads += 1
        self.cycles[-1].loads += 1
        if r.retain:
            self._make_room(r)
        r.cache[pid] = "loaded"

    def _make_room(self, r: SimRunner) -> None:
        while len(r.cache) >= r.capacity:
            self._sync_delta(r)
            victim = self.sched.select_eviction(r.rid)
            if victim is None:
                self.rec(f"runner-{r.rid}", "cache-overflow", None, size=len(r.cache))
                return
            r.cache.pop(victim, None)
            r.reported.discard(victim)
            self.rec(f"runner-{r.rid}", "evict", victim, cycle=self.sched.cycle)

    def _sync_delta(self, r: SimRunner) -> tuple[list, list]:
        current = set(r.cache)
        if not r.retain:
            current = {a.parent for a in r.queue} | set(r.cache)
        added = sorted(current - r.reported)
        removed = sorted(r.reported - current)
        r.reported = current
        self.sched.apply_cache_delta(r.rid, added, removed)
        return added, removed

    def _maybe_start(self, r: SimRunner) -> None:
        if r.busy or not r.queue or not r.alive:
            return
        a = r.queue[0]
        ent = f"runner-{r.rid}"
        kind = r.cache.get(a.parent)
        if kind is None:
            self.rec(ent, "cache-miss", a.child, cycle=a.child.cycle, parent=list(a.parent))
            self._load(r, a.parent, prefetch=False)
            r.cache[a.parent] = "used"
        elif kind == "loaded":
            self.rec(ent, "cache-miss", a.child, cycle=a.child.cycle, parent=list(a.parent))
            r.cache[a.parent] = "used"
        else:
            self.rec(ent, "cache-hit", a.child, cycle=a.child.cycle, parent=list(a.parent))
            r.hits += 1
            self.cycles[-1].hits += 1
        if not r.retain:
            # without a cache only the working parent and queued parents stay
            keep = {q.parent for q in r.queue}
            for pid in [p for p in r.cache if p not in keep]:
                del r.cache[pid]
        r.busy = True
        d = self.duration(a, r.rid)
        self.rec(ent, "propagate-start", a.child, cycle=a.child.cycle, parent=list(a.parent))
        self._at(self.now + d, self._finish, r, a, d)

    def _finish(self, r: SimRunner, a: Assignment, d: float) -> None:
        if not r.alive:
            return
        ent = f"runner-{r.rid}"
        self.rec(ent, "propagate-end", a.child, cycle=a.child.cycle, parent=list(a.parent))
        r.busy_time += d
        r.queue.pop(0)
        r.busy = False
        if r.retain:
            self._make_room(r)
            r.cache[a.child] = "own"
        self._maybe_start(r)
        self.rec(ent, "stage-start", a.child, cycle=a.child.cycle)
        self._at(self.now + self.stage_time, self._staged, r, a)

    def _staged(self, r: SimRunner, a: Assignment) -> None:
        if not r.alive:
            return
        ent = f"runner-{r.rid}"
        self.rec(ent, "stage-end", a.child, cycle=a.child.cycle)
        w = self._weight(a)
        self.rec(ent, "weight-send", a.child, cycle=a.child.cycle, weight=w)
        self._at(self.now + self.latency, self._deliver, r, a, w)

    def _deliver(self, r: SimRunner, a: Assignment, w: float) -> None:
        if not r.alive:
            return
        self._sync_delta(r)
        status = self.sched.on_weight(r.rid, a.child, w)
        if status == "accepted":
            self.rec("server", "weight-accept", a.child, cycle=a.child.cycle, runner=r.rid)
        else:
            self.rec("server", "weight-reject", a.child, cycle=a.child.cycle, reason=status)
        if self.sched.complete():
            self._end_cycle()
        else:
            self._request(r)

    def _end_cycle(self) -> None:
        st = self.cycles[-1]
        st.end = self.now
        t = self.sched.cycle
        self.rec("server", "cycle-end", None, cycle=t)
        if t >= self.final_cycle:
            return
        self.rec("server", "resample-start", None, cycle=t)
        w = normalize(self.sched.weights())
        ms = resample(w, derive_seed(self.seed, Stream.RESAMPLE, t))
        self.rec("server", "resample-end", None, cycle=t, Q=ms.Q)
        self._begin(t + 1, ms)

    def _begin(self, cycle: int, ms: ResampleMultiset) -> None:
        self.multisets.append(ms)
        self.sched.begin_cycle(cycle, ms)
        self.cycles.append(CycleStats(cycle, ms.Q, self.sched.R, start=self.now))
        for r in sorted(self.runners.values(), key=lambda r: r.rid):
            if r.alive:
                self._request(r)

    # entry points ------------------------------------------------------

    def run(self, first: ResampleMultiset | None = None, cycles: int = 1,
            first_cycle: int = 1, hooks: dict | None = None) -> list[CycleStats]:
        """Run ``cycles`` cycles starting from ``first`` (identity by default).

        ``hooks`` maps a virtual time to a callable invoked with the
        simulation, for injecting failures or elasticity.
        """
        self.final_cycle = first_cycle + cycles - 1
        for t, fn in (hooks or {}).items():
            self._at(t, fn, self)
        self._begin(first_cycle, first or ResampleMultiset.identity(self.P))
        while self._events:
            t, _, fn, args = heapq.heappop(self._events)
            self.now = t
            fn(*args)
        return self.cycles


def random_multiset(P: int, seed: int, concentration: float | None = None) -> ResampleMultiset:
    """A resampling outcome from Dirichlet-distributed weights."""
    rng = generator(derive_seed(seed, Stream.INSTANCE, P))
    conc = concentration if concentration is not None else float(rng.choice([0.05, 0.2, 1.0, 5.0]))
    w = rng.dirichlet(np.full(P, conc))
    return resample(normalize(w), derive_seed(seed, Stream.RESAMPLE, P))


def replay_loads(multiset: ResampleMultiset, R: int, *, lookahead: int = 1, seed: int = 0,
                 cycle: int = 1) -> int:
    """Global loads of the cacheless list scheduler with equal durations."""
    sim = Simulation(multiset.P, R, capacity=0, lookahead=lookahead, duration=1.0, seed=seed,
                     trace=MemoryTrace("server"))
    return sim.run(multiset, cycles=1, first_cycle=cycle)[0].loads


class _EntityTrace(TraceWriter):
    """Forwards scheduler events to the simulation trace at virtual time."""

    def __init__(self, inner: TraceWriter, entity: str, sim: "Simulation"):
        super().__init__(None, entity)
        self.inner, self.sim = inner, sim

    def record(self, event, particle=None, *, entity=None, ts=None, **extra):
        self.inner.record(event, particle, entity=entity or self.entity,
                          ts=self.sim._ts() if ts is None else ts, **extra)
