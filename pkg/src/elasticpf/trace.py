"""Structured trace events.

Each process appends newline-delimited JSON records to its own file.  The
first line is a header; every following line is one event::

    {"ts": 1234, "entity": "runner-3", "event": "stage-end",
     "particle": [2, 17], "extra": {"cycle": 2}}

``ts`` is nanoseconds since the experiment epoch.  Partial files written by a
crashed process still parse line by line.
"""

from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path
from typing import Iterable, NamedTuple

from .errors import TraceError

FORMAT = "elasticpf-trace"
FORMAT_VERSION = 1

EVENTS = frozenset({
    "assign", "propagate-start", "propagate-end", "cache-hit", "cache-miss",
    "global-load-start", "global-load-end", "stage-start", "stage-end",
    "weight-send", "weight-accept", "evict", "prefetch-start", "prefetch-end",
    "prefetch-cancel", "resample-start", "resample-end", "runner-join",
    "runner-lost", "checkpoint", "heartbeat-miss", "failure-injected",
    # bookkeeping events beyond the core vocabulary
    "weight-reject", "cycle-begin", "cycle-end", "runner-retire", "cache-overflow",
    "observation-load", "process-start", "process-exit", "protocol-error",
    "spawn", "restart", "kill", "elasticity", "run-end", "evict-request",
    "cancel-ack", "backpressure", "restore", "message-ignored",
})


class TraceEvent(NamedTuple):
    ts: int
    entity: str
    event: str
    particle: tuple[int, int] | None
    extra: dict

    @property
    def cycle(self) -> int | None:
        return self.extra.get("cycle")


class Clock:
    """Nanoseconds since a shared epoch on the system-wide monotonic clock."""

    def __init__(self, epoch_ns: int | None = None):
        self.epoch_ns = time.monotonic_ns() if epoch_ns is None else int(epoch_ns)

    def now(self) -> int:
        return time.monotonic_ns() - self.epoch_ns

    def seconds(self) -> float:
        return self.now() / 1e9


class TraceWriter:
    """Thread-safe appender; every record is flushed so crashes lose nothing.

    I/O failures never propagate: events are dropped and counted instead.
    """

    def __init__(self, path: str | os.PathLike | None, entity: str, clock: Clock | None = None):
        self.entity = entity
        self.clock = clock or Clock()
        self.dropped = 0
        self.count = 0
        self._lock = threading.Lock()
        self._fh = None
        self._broken = False
        if path is not None:
            try:
                Path(path).parent.mkdir(parents=True, exist_ok=True)
                self._fh = open(path, "a", encoding="utf-8")
                header = {"format": FORMAT, "version": FORMAT_VERSION, "entity": entity,
                          "epoch_ns": self.clock.epoch_ns, "pid": os.getpid()}
                self._fh.write(json.dumps(header) + "\n")
                self._fh.flush()
            except OSError:
                self._fh = None
                self._broken = True

    def record(self, event: str, particle=None, *, entity: str | None = None,
               ts: int | None = None, **extra) -> None:
        with self._lock:
            rec = {
                "ts": self.clock.now() if ts is None else int(ts),
                "entity": entity or self.entity,
                "event": event,
                "particle": None if particle is None else [int(particle[0]), int(particle[1])],
                "extra": extra,
            }
            self.count += 1
            if self._fh is None:
                self.dropped += self._broken
                return
            try:
                self._fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
                self._fh.flush()
            except (OSError, ValueError):
                self.dropped += 1

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                try:
                    self._fh.close()
                except OSError:
                    pass
                self._fh = None


class NullTrace(TraceWriter):
    def __init__(self, entity: str = "null"):
        super().__init__(None, entity)


class MemoryTrace(TraceWriter):
    """Keeps events in a list; used by the in-process simulator and tests."""

    def __init__(self, entity: str = "sim", clock: Clock | None = None):
        super().__init__(None, entity, clock)
        self.events: list[TraceEvent] = []

    def record(self, event, particle=None, *, entity=None, ts=None, **extra):
        with self._lock:
            self.count += 1
            self.events.append(TraceEvent(
                self.clock.now() if ts is None else int(ts), entity or self.entity, event,
                None if particle is None else (int(particle[0]), int(particle[1])), extra))

    def dump(self, path) -> None:
        write_events(path, self.events, entity=self.entity)


def write_events(path, events: Iterable[TraceEvent], entity: str = "merged") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT, "version": FORMAT_VERSION, "entity": entity}) + "\n")
        for e in events:
            fh.write(json.dumps({"ts": e.ts, "entity": e.entity, "event": e.event,
                                 "particle": None if e.particle is None else list(e.particle),
                                 "extra": e.extra}, separators=(",", ":")) + "\n")


def read_trace_file(path) -> list[TraceEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # torn final line of a killed process
                continue
            if lineno == 0 and rec.get("format") == FORMAT:
                continue
            if "event" not in rec:
                continue
            p = rec.get("particle")
            events.append(TraceEvent(int(rec["ts"]), rec["entity"], rec["event"],
                                     None if p is None else (int(p[0]), int(p[1])),
                                     rec.get("extra") or {}))
    return events


def check_entity_order(events: Iterable[TraceEvent]) -> None:
    """Raise if any entity's timestamps go backwards in file order."""
    last: dict[str, int] = {}
    for e in events:
        prev = last.get(e.entity)
        if prev is not None and e.ts < prev:
            raise TraceError(f"timestamps of {e.entity} go backwards ({prev} -> {e.ts})")
        last[e.entity] = e.ts


def read_trace_dir(path) -> list[TraceEvent]:
    """Merge every ``*.jsonl`` trace in ``path`` into one time-ordered list.

    Per-file order is validated before merging.  Server restarts reuse the
    ``server`` entity in a new file, so validation is per file.
    """
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    if not files:
        raise TraceError(f"no trace files in {path}")
    merged = []
    for f in files:
        evs = read_trace_file(f)
        check_entity_order(evs)
        merged.extend(evs)
    merged.sort(key=lambda e: e.ts)
    return merged
