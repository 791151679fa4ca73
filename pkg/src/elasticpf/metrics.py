"""Pure functions over merged trace events.

Every function takes a list of :class:`~elasticpf.trace.TraceEvent` (as
returned by :func:`~elasticpf.trace.read_trace_dir` or produced in memory by
the simulator) and returns plain data.  Ratio metrics skip the first and last
cycle by default to remove warm-up and drain effects.
"""

from __future__ import annotations

import bisect
import csv
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import UndefinedMetricError
from .filtering import ResampleMultiset
from .scheduler import Scheduler
from .trace import TraceEvent

RUNNER_PREFIX = "runner-"


def _is_runner(e: TraceEvent) -> bool:
    return e.entity.startswith(RUNNER_PREFIX)


def _rid(entity: str) -> int:
    return int(entity[len(RUNNER_PREFIX):])


def cycles_in(events: Iterable[TraceEvent]) -> list[int]:
    return sorted({e.extra["cycle"] for e in events
                   if e.entity == "server" and e.event == "cycle-begin"})


def _window(cycles: Sequence[int], exclude_edges: bool) -> list[int]:
    cycles = sorted(cycles)
    return cycles[1:-1] if exclude_edges else list(cycles)


# per-cycle counts -----------------------------------------------------------

@dataclass
class CycleMetrics:
    cycle: int
    Q: int
    runners: int
    global_loads: int
    hits: int
    misses: int
    wall_time: float | None
    resample_ms: float | None

    @property
    def bound(self) -> int:
        return self.Q + self.runners - 1

    @property
    def hit_ratio(self) -> float | None:
        n = self.hits + self.global_loads
        return self.hits / n if n else None


def cycle_metrics(events: Sequence[TraceEvent]) -> dict[int, CycleMetrics]:
    Q: dict[int, int] = {}
    begin: dict[int, int] = {}
    end: dict[int, int] = {}
    resample: dict[int, float] = {}
    loads, hits, misses = Counter(), Counter(), Counter()
    runners: dict[int, set] = defaultdict(set)
    for e in events:
        c = e.extra.get("cycle")
        if e.entity == "server":
            if e.event == "cycle-begin":
                Q.setdefault(c, e.extra["Q"])
                begin.setdefault(c, e.ts)
            elif e.event == "cycle-end":
                end[c] = e.ts
            elif e.event == "resample-end" and "ms" in e.extra:
                resample[c] = e.extra["ms"]
            elif e.event == "assign":
                runners[c].add(e.extra["runner"])
        elif _is_runner(e) and c is not None:
            if e.event == "global-load-start":
                loads[c] += 1
            elif e.event == "cache-hit":
                hits[c] += 1
            elif e.event == "cache-miss":
                misses[c] += 1
    out = {}
    for c in sorted(Q):
        wall = (end[c] - begin[c]) / 1e9 if c in end else None
        out[c] = CycleMetrics(c, Q[c], len(runners[c]), loads[c], hits[c], misses[c], wall,
                              resample.get(c))
    return out


def cache_hit_ratio(events: Sequence[TraceEvent], cycles: Sequence[int] | None = None,
                    exclude_edges: bool = True) -> float:
    """Hits over hits plus global loads, over ``cycles`` minus its first and last."""
    cm = cycle_metrics(events)
    span = _window(cycles if cycles is not None else list(cm), exclude_edges)
    hits = sum(cm[c].hits for c in span if c in cm)
    loads = sum(cm[c].global_loads for c in span if c in cm)
    if hits + loads == 0:
        raise UndefinedMetricError("no cache accesses in the selected cycles")
    return hits / (hits + loads)


@dataclass(frozen=True)
class BoundCheck:
    cycle: int
    Q: int
    loads: int
    bound: int

    @property
    def ok(self) -> bool:
        return self.loads <= self.bound


def loads_vs_bound(events: Sequence[TraceEvent]) -> list[BoundCheck]:
    return [BoundCheck(c, m.Q, m.global_loads, m.bound) for c, m in cycle_metrics(events).items()]


# replay comparison ----------------------------------------------------------------

def request_sequence(events: Sequence[TraceEvent], cycle: int) -> list[int]:
    """Runner ids in the order the server handed out cycle ``cycle``'s tasks."""
    return [e.extra["runner"] for e in events
            if e.entity == "server" and e.event == "assign" and e.extra.get("cycle") == cycle]


def replay_no_cache(multiset: ResampleMultiset, requests: Sequence[int], *, depth: int = 2,
                    seed: int = 0, cycle: int = 1) -> int:
    """Global loads of the cacheless list scheduler fed the same request sequence.

    A cacheless runner keeps only the parent it is working on, so it loads
    whenever consecutive assignments change parent.
    """
    sched = Scheduler(multiset.P, seed)
    for r in sorted(set(requests)):
        sched.register(r)
    sched.begin_cycle(cycle, multiset)
    last: dict[int, object] = {}
    loads = 0
    for r in requests:
        book = sched.runners[r]
        if len(book.in_flight) >= depth:
            done = book.in_flight[0]
            sched.on_weight(r, done.child, 1.0)
        a = sched.next_task(r)
        if a is None:
            continue
        if last.get(r) != a.parent:
            loads += 1
        last[r] = a.parent
    return loads


@dataclass(frozen=True)
class ReplayCheck:
    cycle: int
    cached_loads: int
    replay_loads: int

    @property
    def ok(self) -> bool:
        return self.cached_loads <= self.replay_loads


def replay_comparison(events: Sequence[TraceEvent], multisets: dict[int, ResampleMultiset], *,
                      depth: int = 2, seed: int = 0) -> list[ReplayCheck]:
    """``multisets[t]`` is the multiset that produced cycle ``t``'s tasks."""
    cm = cycle_metrics(events)
    requests: dict[int, list[int]] = defaultdict(list)
    for e in events:
        if e.entity == "server" and e.event == "assign":
            requests[e.extra.get("cycle")].append(e.extra["runner"])
    out = []
    for c in sorted(cm):
        if c not in multisets:
            continue
        req = requests[c]
        out.append(ReplayCheck(c, cm[c].global_loads,
                               replay_no_cache(multisets[c], req, depth=depth, seed=seed, cycle=c)))
    return out


# Gantt ---------------------------------------------------------------------------

GANTT_FIELDS = ("runner", "cycle", "task", "parent", "start_ns", "end_ns", "cache_hit", "status")


@dataclass(frozen=True)
class GanttRow:
    runner: int
    cycle: int
    task: int
    parent: int
    start_ns: int
    end_ns: int
    cache_hit: bool
    status: str  # "done" or "crashed"


def gantt_rows(events: Sequence[TraceEvent]) -> list[GanttRow]:
    open_: dict[tuple, TraceEvent] = {}
    hit: dict[tuple, bool] = {}
    last_ts: dict[str, int] = {}
    rows = []
    for e in events:
        if not _is_runner(e):
            continue
        last_ts[e.entity] = max(last_ts.get(e.entity, e.ts), e.ts)
        key = (e.entity, e.particle)
        if e.event in ("cache-hit", "cache-miss"):
            hit[key] = e.event == "cache-hit"
        elif e.event == "propagate-start":
            open_[key] = e
        elif e.event == "propagate-end" and key in open_:
            s = open_.pop(key)
            rows.append(GanttRow(_rid(e.entity), e.particle[0], e.particle[1],
                                 int(s.extra["parent"][1]), s.ts, e.ts,
                                 hit.get(key, False), "done"))
    for (entity, pid), s in open_.items():
        rows.append(GanttRow(_rid(entity), pid[0], pid[1], int(s.extra["parent"][1]), s.ts,
                             last_ts[entity], hit.get((entity, pid), False), "crashed"))
    rows.sort(key=lambda r: (r.runner, r.start_ns, r.cycle, r.task))
    return rows


def export_gantt(rows: Sequence[GanttRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GANTT_FIELDS)
        for r in rows:
            w.writerow([r.runner, r.cycle, r.task, r.parent, r.start_ns, r.end_ns,
                        int(r.cache_hit), r.status])


def import_gantt(path) -> list[GanttRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [GanttRow(int(d["runner"]), int(d["cycle"]), int(d["task"]), int(d["parent"]),
                         int(d["start_ns"]), int(d["end_ns"]), d["cache_hit"] == "1", d["status"])
                for d in rd]


def gantt_summary(rows: Sequence[GanttRow], exclude_edges: bool = True) -> dict:
    """Metrics recomputable from a Gantt CSV alone."""
    cycles = sorted({r.cycle for r in rows})
    span = set(_window(cycles, exclude_edges))
    sel = [r for r in rows if r.cycle in span and r.status == "done"]
    busy = defaultdict(int)
    for r in rows:
        busy[r.runner] += r.end_ns - r.start_ns
    return {
        "tasks": len(rows),
        "hit_fraction": (sum(r.cache_hit for r in sel) / len(sel)) if sel else None,
        "busy_ns": dict(sorted(busy.items())),
        "crashed": sum(r.status == "crashed" for r in rows),
    }


# time accounting --------------------------------------------------------------------

def _cycle_begins(events) -> dict[int, int]:
    out: dict[int, int] = {}
    for e in events:
        if e.entity == "server" and e.event == "cycle-begin":
            out.setdefault(e.extra["cycle"], e.ts)
    return out


def busy_fraction(events: Sequence[TraceEvent], exclude_edges: bool = True) -> float:
    """Model-worker busy time over the time runners had to wait for nothing but work.

    For each runner and cycle the window runs from the cycle start (or the
    runner's first assignment, if it joined later) to its last propagation
    end, which leaves out the end-of-cycle barrier.
    """
    begins = _cycle_begins(events)
    rows = [r for r in gantt_rows(events) if r.status == "done"]
    span = set(_window(sorted(begins), exclude_edges))
    first_assign: dict[tuple, int] = {}
    for e in events:
        if _is_runner(e) and e.event == "assign":
            first_assign.setdefault((_rid(e.entity), e.extra["cycle"]), e.ts)
    per: dict[tuple, list] = defaultdict(list)
    for r in rows:
        if r.cycle in span:
            per[(r.runner, r.cycle)].append(r)
    busy = window = 0
    for (rid, c), rs in per.items():
        start = max(begins[c], first_assign.get((rid, c), begins[c]))
        stop = max(r.end_ns for r in rs)
        busy += sum(r.end_ns - r.start_ns for r in rs)
        window += stop - start
    if window <= 0:
        raise UndefinedMetricError("no complete propagations in the selected cycles")
    return busy / window


def cycle_durations(events: Sequence[TraceEvent], exclude_edges: bool = True) -> dict[int, float]:
    cm = cycle_metrics(events)
    span = _window(list(cm), exclude_edges)
    return {c: cm[c].wall_time for c in span if cm[c].wall_time is not None}


def staging_overlap(events: Sequence[TraceEvent]) -> float:
    """Fraction of staging wall time during which the model worker was propagating.

    Stages of a runner's last task in a cycle are left out: nothing remains
    to overlap them with.
    """
    prop: dict[str, list] = defaultdict(list)
    stages: dict[str, list] = defaultdict(list)
    opened: dict[tuple, int] = {}
    last_task: dict[tuple, tuple] = {}
    for r in gantt_rows(events):
        prop[f"{RUNNER_PREFIX}{r.runner}"].append((r.start_ns, r.end_ns))
        k = (r.runner, r.cycle)
        if k not in last_task or r.start_ns > last_task[k][0]:
            last_task[k] = (r.start_ns, r.task)
    skip = {(f"{RUNNER_PREFIX}{rid}", (c, t)) for (rid, c), (_, t) in last_task.items()}
    for e in events:
        if not _is_runner(e):
            continue
        if e.event == "stage-start":
            opened[(e.entity, e.particle)] = e.ts
        elif e.event == "stage-end" and (e.entity, e.particle) in opened:
            s = opened.pop((e.entity, e.particle))
            if (e.entity, e.particle) not in skip:
                stages[e.entity].append((s, e.ts))
    total = covered = 0
    for ent, ivs in stages.items():
        runs: list[list[int]] = []
        for p, q in sorted(prop[ent]):
            # merge, in case a crashed row's open end runs into a later incarnation
            if runs and p <= runs[-1][1]:
                runs[-1][1] = max(runs[-1][1], q)
            else:
                runs.append([p, q])
        ends = [q for _, q in runs]
        for a, b in ivs:
            total += b - a
            i = bisect.bisect_right(ends, a)
            while i < len(runs) and runs[i][0] < b:
                p, q = runs[i]
                covered += min(b, q) - max(a, p)
                i += 1
    if total == 0:
        raise UndefinedMetricError("no overlappable staging intervals")
    return covered / total


def model_wait_fraction(events: Sequence[TraceEvent]) -> float:
    """Time the model worker waited for a parent, relative to propagation time."""
    miss: dict[tuple, int] = {}
    wait = prop = 0
    for e in events:
        if not _is_runner(e):
            continue
        key = (e.entity, e.particle)
        if e.event in ("cache-miss", "cache-hit"):
            miss[key] = e.ts
        elif e.event == "propagate-start" and key in miss:
            wait += e.ts - miss.pop(key)
    for r in gantt_rows(events):
        prop += r.end_ns - r.start_ns
    if prop == 0:
        raise UndefinedMetricError("no propagations")
    return wait / prop


# invariants ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    name: str
    detail: str


def check_ordering(events: Sequence[TraceEvent]) -> list[Violation]:
    """stage-end < weight-send < weight-accept for every accepted weight, per runner."""
    staged: dict[tuple, int] = {}
    sent: dict[tuple, int] = {}
    out = []
    for e in events:
        if _is_runner(e) and e.event == "stage-end":
            staged.setdefault((_rid(e.entity), e.particle), e.ts)
        elif _is_runner(e) and e.event == "weight-send":
            sent.setdefault((_rid(e.entity), e.particle), e.ts)
    for e in events:
        if e.entity == "server" and e.event == "weight-accept":
            key = (e.extra["runner"], e.particle)
            s, w = staged.get(key), sent.get(key)
            if s is None or s >= e.ts:
                out.append(Violation("stage-before-accept",
                                     f"{e.particle} accepted from runner {key[0]} without prior stage-end"))
            elif w is None or not s <= w <= e.ts:
                out.append(Violation("stage-before-send",
                                     f"{e.particle}: weight-send not between stage-end and accept"))
    return out


def check_completeness(events: Sequence[TraceEvent], P: int, cycles: int) -> list[Violation]:
    out = []
    accepted: dict[int, Counter] = defaultdict(Counter)
    for e in events:
        if e.entity == "server" and e.event == "weight-accept":
            accepted[e.particle[0]][e.particle[1]] += 1
    for c in range(1, cycles + 1):
        cnt = accepted.get(c, Counter())
        if len(cnt) != P:
            out.append(Violation("exactly-once", f"cycle {c}: {len(cnt)} of {P} weights accepted"))
        dup = [k for k, n in cnt.items() if n > 1]
        if dup:
            out.append(Violation("exactly-once", f"cycle {c}: tasks accepted twice: {dup[:10]}"))
    # every assignment ends in an accept, a loss, a revocation or a server restart
    restores = sorted(e.ts for e in events if e.entity == "server" and e.event == "restore")
    ended_runner: dict[int, int] = {}
    for e in events:
        if e.entity == "server" and e.event in ("runner-lost", "runner-retire"):
            ended_runner.setdefault(e.extra.get("runner"), e.ts)
    revoked = Counter()
    for e in events:
        if e.entity == "server" and e.event == "cancel-ack" and e.extra.get("revoked"):
            revoked[(e.extra["runner"], e.extra["cycle"])] += 1
    done = {(e.extra["runner"], e.particle) for e in events
            if e.entity == "server" and e.event == "weight-accept"}
    unresolved = Counter()
    for e in events:
        if e.entity != "server" or e.event != "assign":
            continue
        r = e.extra["runner"]
        if (r, e.particle) in done:
            continue
        if r in ended_runner and ended_runner[r] >= e.ts:
            continue
        if any(t > e.ts for t in restores):
            continue
        unresolved[(r, e.extra["cycle"])] += 1
    for key, n in unresolved.items():
        if n > revoked.get(key, 0):
            out.append(Violation("trace-completeness",
                                 f"runner {key[0]} cycle {key[1]}: {n - revoked.get(key, 0)} "
                                 "assignments never resolved"))
    return out


def check_protocol(events: Sequence[TraceEvent]) -> list[Violation]:
    errs = [e for e in events if e.event == "protocol-error" and e.entity == "server"]
    return [Violation("protocol-integrity", f"{len(errs)} protocol errors, first: "
                      f"{errs[0].extra.get('reason') or errs[0].extra.get('error')}")] if errs else []


def check_multisets(multisets: dict[int, ResampleMultiset], P: int) -> list[Violation]:
    out = []
    for c, ms in sorted(multisets.items()):
        try:
            ms.validate(P)
        except ValueError as exc:
            out.append(Violation("valid-multiset", f"cycle {c}: {exc}"))
    return out


# report ----------------------------------------------------------------------------------

@dataclass
class MetricsReport:
    per_cycle: list[dict]
    whole_run: dict = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"per_cycle": self.per_cycle, "whole_run": self.whole_run,
                "violations": [asdict(v) for v in self.violations]}

    def write_csv(self, path) -> None:
        if not self.per_cycle:
            Path(path).write_text("")
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.per_cycle[0]))
            w.writeheader()
            w.writerows(self.per_cycle)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _try(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except UndefinedMetricError:
        return None


def build_report(events: Sequence[TraceEvent], *, P: int | None = None, cycles: int | None = None,
                 multisets: dict[int, ResampleMultiset] | None = None,
                 source_multisets: dict[int, ResampleMultiset] | None = None,
                 depth: int = 2, seed: int = 0) -> MetricsReport:
    cm = cycle_metrics(events)
    per = []
    for c, m in cm.items():
        per.append({"cycle": c, "Q": m.Q, "runners": m.runners, "global_loads": m.global_loads,
                    "bound": m.bound, "within_bound": m.global_loads <= m.bound,
                    "hits": m.hits, "cache_hit_ratio": m.hit_ratio,
                    "wall_time_s": m.wall_time, "resample_ms": m.resample_ms})
    whole = {
        "cache_hit_ratio": _try(cache_hit_ratio, events),
        "busy_fraction": _try(busy_fraction, events),
        "staging_overlap": _try(staging_overlap, events),
        "model_wait_fraction": _try(model_wait_fraction, events),
        "mean_cycle_time_s": None,
        "tasks": len(gantt_rows(events)),
    }
    d = cycle_durations(events)
    if d:
        whole["mean_cycle_time_s"] = sum(d.values()) / len(d)
    violations = check_ordering(events) + check_protocol(events)
    if P is not None and cycles is not None:
        violations += check_completeness(events, P, cycles)
    if multisets and P is not None:
        violations += check_multisets(multisets, P)
    if source_multisets:
        rep = replay_comparison(events, source_multisets, depth=depth, seed=seed)
        whole["replay"] = [asdict(r) | {"ok": r.ok} for r in rep]
    return MetricsReport(per, whole, violations)


# scaling --------------------------------------------------------------------------------

class ScalingMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingRow:
    label: str
    runners: int
    particles_per_runner: float
    mean_cycle_time: float
    busy_fraction: float | None
    weak_efficiency: float


def scaling_report(runs: dict[str, tuple[Sequence[TraceEvent], dict]], reference: str) -> list[ScalingRow]:
    """Compare runs against ``reference``.

    ``runs`` maps a label to ``(events, info)`` where ``info`` carries
    ``model`` (a comparable description) and ``P``/``R``.  Weak-scaling
    efficiency is reference cycle time over observed cycle time; strong
    scaling is read off the busy fraction.
    """
    if reference not in runs:
        raise ScalingMismatchError(f"reference {reference!r} not among the runs")
    ref_model = runs[reference][1].get("model")
    rows = []
    ref_time = None
    for label, (events, info) in runs.items():
        if info.get("model") != ref_model:
            raise ScalingMismatchError(f"run {label!r} uses a different model than the reference")
        d = cycle_durations(events)
        if not d:
            raise UndefinedMetricError(f"run {label!r} has no interior cycles")
        mean = sum(d.values()) / len(d)
        if label == reference:
            ref_time = mean
        rows.append((label, info["R"], info["P"] / info["R"], mean, _try(busy_fraction, events)))
    return [ScalingRow(l, R, ppr, m, b, ref_time / m) for l, R, ppr, m, b in rows]
