"""Distributed particle cache: a bounded per-runner cache over a shared store.

The global store is a directory (standing in for a parallel file system)::

    <root>/cycle_<t>/state_<index>.bin

Files are written to a temporary name and renamed into place, so readers
never see a partial state.  Evictions are never decided locally; the cache
only enforces that the victim is persisted and not in use.
"""

from __future__ import annotations

import enum
import os
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    CacheFullError,
    ChecksumError,
    ProtocolError,
    ProtocolViolation,
    StagingError,
    StateFormatError,
    StateNotFoundError,
)
from .statefile import decode_state, encode_state
from .trace import NullTrace, TraceWriter


class ParticleId(NamedTuple):
    cycle: int
    index: int

    def __str__(self):
        return f"({self.cycle},{self.index})"


@dataclass
class CacheEntry:
    id: ParticleId
    state: np.ndarray
    persisted: bool = False
    pinned: int = 0
    # set when the entry arrived through a global load and has not been
    # consumed yet; its first use counts as a miss, not a hit
    fresh_load: bool = False


class LocalCache:
    """Bounded node-local cache owned by one runner.

    All mutations hold ``self.lock``; :meth:`wait_for` lets the model worker
    block until the helper delivers a missing state.
    """

    def __init__(self, capacity: int, trace: TraceWriter | None = None, max_overflow: int = 1):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self.max_overflow = max_overflow
        self.trace = trace or NullTrace()
        self.entries: dict[ParticleId, CacheEntry] = {}
        self.lock = threading.RLock()
        self._changed = threading.Condition(self.lock)
        self.hits = 0
        self.misses = 0
        self.peak = 0
        self._reported: set[ParticleId] = set()
        self._delta_added: set[ParticleId] = set()
        self._delta_removed: set[ParticleId] = set()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, pid):
        return pid in self.entries

    def ids(self) -> list[ParticleId]:
        with self.lock:
            return sorted(self.entries)

    def free_slots(self) -> int:
        with self.lock:
            return self.capacity - len(self.entries)

    def put(self, pid: ParticleId, state, *, persisted: bool = False,
            fresh_load: bool = False, transient: bool = False) -> CacheEntry:
        """Insert ``state``; idempotent for an id already present.

        ``transient`` admits one entry beyond capacity while an eviction
        directive is in flight.
        """
        pid = ParticleId(*pid)
        with self.lock:
            if pid in self.entries:
                entry = self.entries[pid]
                if persisted and not entry.persisted:
                    self._set_persisted(entry)
                return entry
            limit = self.capacity + (self.max_overflow if transient else 0)
            if len(self.entries) >= limit:
                raise CacheFullError(f"cache full ({len(self.entries)}/{self.capacity})")
            entry = CacheEntry(pid, np.asarray(state, dtype=np.float64), False, 0, fresh_load)
            self.entries[pid] = entry
            if persisted:
                self._set_persisted(entry)
            if len(self.entries) > self.capacity:
                self.trace.record("cache-overflow", pid, size=len(self.entries),
                                  capacity=self.capacity)
            self.peak = max(self.peak, len(self.entries))
            self._changed.notify_all()
            return entry

    def get(self, pid: ParticleId):
        """Return the state on a hit, ``None`` on a miss."""
        pid = ParticleId(*pid)
        with self.lock:
            entry = self.entries.get(pid)
            if entry is None:
                self.misses += 1
                return None
            self.hits += 1
            return entry.state

    def acquire(self, pid: ParticleId):
        """Pin ``pid`` for the model worker.

        Returns ``(state, hit)``; ``state`` is ``None`` when absent.  A present
        entry that was just brought in by a global load is not a hit: its
        presence is owed to that load.
        """
        pid = ParticleId(*pid)
        with self.lock:
            entry = self.entries.get(pid)
            if entry is None:
                self.misses += 1
                return None, False
            entry.pinned += 1
            if entry.fresh_load:
                entry.fresh_load = False
                self.misses += 1
                return entry.state, False
            self.hits += 1
            return entry.state, True

    def pin_loaded(self, pid: ParticleId):
        """Pin a state delivered after a miss; the miss was already counted."""
        with self.lock:
            entry = self.entries[ParticleId(*pid)]
            entry.pinned += 1
            entry.fresh_load = False
            return entry.state

    def unpin(self, pid: ParticleId) -> None:
        with self.lock:
            entry = self.entries.get(ParticleId(*pid))
            if entry is not None and entry.pinned:
                entry.pinned -= 1

    def wait_for(self, pid: ParticleId, timeout: float | None = None) -> bool:
        pid = ParticleId(*pid)
        with self._changed:
            return self._changed.wait_for(lambda: pid in self.entries, timeout)

    def mark_persisted(self, pid: ParticleId) -> None:
        with self.lock:
            entry = self.entries.get(ParticleId(*pid))
            if entry is not None and not entry.persisted:
                self._set_persisted(entry)

    def _set_persisted(self, entry: CacheEntry) -> None:
        entry.persisted = True
        self._delta_removed.discard(entry.id)
        if entry.id not in self._reported:
            self._delta_added.add(entry.id)

    def evict(self, pid: ParticleId) -> None:
        """Server-directed eviction; only persisted, unpinned entries qualify."""
        pid = ParticleId(*pid)
        with self.lock:
            entry = self.entries.get(pid)
            if entry is None:
                raise KeyError(pid)
            if not entry.persisted or entry.pinned:
                raise ProtocolViolation(
                    f"refusing to evict {pid}: persisted={entry.persisted} pinned={entry.pinned}")
            self._remove(pid)
            self.trace.record("evict", pid)

    def discard(self, pid: ParticleId) -> bool:
        """Drop an entry for a reason other than eviction (cancel, no-retain)."""
        pid = ParticleId(*pid)
        with self.lock:
            entry = self.entries.get(pid)
            if entry is None:
                return False
            if entry.pinned:
                raise ProtocolViolation(f"cannot drop pinned entry {pid}")
            self._remove(pid)
            return True

    def _remove(self, pid: ParticleId) -> None:
        del self.entries[pid]
        self._delta_added.discard(pid)
        if pid in self._reported:
            self._delta_removed.add(pid)
        self._changed.notify_all()

    def take_delta(self) -> tuple[list[ParticleId], list[ParticleId]]:
        """Persisted entries added and entries removed since the last call."""
        with self.lock:
            added = sorted(self._delta_added)
            removed = sorted(self._delta_removed)
            self._reported.update(added)
            self._reported.difference_update(removed)
            self._delta_added.clear()
            self._delta_removed.clear()
            return added, removed


class GlobalStore:
    """Shared directory of committed state files."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, pid: ParticleId) -> Path:
        return self.root / f"cycle_{pid[0]}" / f"state_{pid[1]}.bin"

    def exists(self, pid: ParticleId) -> bool:
        return self.path(pid).exists()

    def stage(self, pid: ParticleId, state) -> bool:
        """Atomically persist ``state``; returns False if already committed."""
        pid = ParticleId(*pid)
        final = self.path(pid)
        blob = encode_state(pid.cycle, pid.index, state)
        if final.exists():
            try:
                if final.read_bytes() == blob:
                    return False
                decode_state(final.read_bytes())
                return False
            except (ChecksumError, StateFormatError, OSError):
                pass  # overwrite a damaged file
        tmp = final.with_name(f".{final.name}.{os.getpid()}.{uuid.uuid4().hex[:8]}.tmp")
        try:
            final.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, final)
        except OSError as exc:
            try:
                tmp.unlink()
            except OSError:
                pass
            raise StagingError(f"staging {pid} failed: {exc}") from exc
        return True

    def load(self, pid: ParticleId) -> np.ndarray:
        pid = ParticleId(*pid)
        try:
            blob = self.path(pid).read_bytes()
        except FileNotFoundError:
            raise StateNotFoundError(f"no committed state for {pid}") from None
        cycle, index, values = decode_state(blob)
        if (cycle, index) != (pid.cycle, pid.index):
            raise StateFormatError(f"file for {pid} holds ({cycle},{index})")
        return values


def stage_to_global(cache: LocalCache, pid: ParticleId, store: GlobalStore,
                    trace: TraceWriter | None = None) -> None:
    """Copy a cached entry to the global store and mark it persisted."""
    trace = trace or cache.trace
    pid = ParticleId(*pid)
    with cache.lock:
        entry = cache.entries.get(pid)
        if entry is None:
            raise KeyError(pid)
        state = entry.state
    trace.record("stage-start", pid, cycle=pid.cycle)
    store.stage(pid, state)
    cache.mark_persisted(pid)
    trace.record("stage-end", pid, cycle=pid.cycle)


def load_from_global(store: GlobalStore, pid: ParticleId) -> np.ndarray:
    return store.load(pid)


class PrefetchStatus(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    CANCELLED = "cancelled"
    FAILED = "failed"


class PrefetchHandle:
    def __init__(self, pid: ParticleId, for_cycle: int | None = None):
        self.id = pid
        self.for_cycle = for_cycle
        self.status = PrefetchStatus.PENDING
        self.error: Exception | None = None
        self.done = threading.Event()

    def __repr__(self):
        return f"PrefetchHandle({self.id}, {self.status.value})"


class Prefetcher:
    """Background loads into a :class:`LocalCache` with cancellation.

    With ``background=True`` a private thread executes loads; otherwise the
    owner drives them by calling :meth:`execute` (the runner's helper worker
    does this so all global I/O stays on one worker).
    """

    def __init__(self, cache: LocalCache, store: GlobalStore, trace: TraceWriter | None = None,
                 background: bool = False):
        self.cache = cache
        self.store = store
        self.trace = trace or cache.trace
        self.handles: dict[ParticleId, PrefetchHandle] = {}
        self._lock = threading.Lock()
        self._queue: list[PrefetchHandle] = []
        self._wake = threading.Condition(self._lock)
        self._stop = False
        self._thread = None
        if background:
            self._thread = threading.Thread(target=self._run, daemon=True, name="prefetch")
            self._thread.start()

    def prefetch(self, pid: ParticleId, for_cycle: int | None = None) -> PrefetchHandle:
        pid = ParticleId(*pid)
        with self._lock:
            h = self.handles.get(pid)
            if h is not None and h.status in (PrefetchStatus.PENDING, PrefetchStatus.RUNNING):
                return h
            h = PrefetchHandle(pid, for_cycle)
            self.handles[pid] = h
            if pid in self.cache:
                h.status = PrefetchStatus.DONE
                h.done.set()
                return h
            self._queue.append(h)
            self._wake.notify()
        return h

    def pending(self, pid: ParticleId) -> PrefetchHandle | None:
        h = self.handles.get(ParticleId(*pid))
        if h is not None and h.status in (PrefetchStatus.PENDING, PrefetchStatus.RUNNING):
            return h
        return None

    def execute(self, handle: PrefetchHandle, *, transient: bool = False) -> None:
        """Perform the load for ``handle`` in the calling thread."""
        with self._lock:
            if handle in self._queue:
                self._queue.remove(handle)
            if handle.status is not PrefetchStatus.PENDING:
                return
            handle.status = PrefetchStatus.RUNNING
        pid = handle.id
        cyc = handle.for_cycle if handle.for_cycle is not None else pid.cycle + 1
        self.trace.record("prefetch-start", pid, cycle=cyc)
        self.trace.record("global-load-start", pid, cycle=cyc, prefetch=True)
        try:
            state = self.store.load(pid)
        except Exception as exc:  # reported through the handle
            with self._lock:
                handle.status = PrefetchStatus.FAILED
                handle.error = exc
            handle.done.set()
            return
        self.trace.record("global-load-end", pid, cycle=cyc, prefetch=True)
        with self._lock:
            cancelled = handle.status is PrefetchStatus.CANCELLED
            if not cancelled:
                try:
                    self.cache.put(pid, state, persisted=True, fresh_load=True,
                                   transient=transient)
                except CacheFullError as exc:
                    handle.status = PrefetchStatus.FAILED
                    handle.error = exc
                    handle.done.set()
                    return
                handle.status = PrefetchStatus.DONE
        self.trace.record("prefetch-end", pid, cycle=cyc, cancelled=cancelled)
        handle.done.set()

    def cancel(self, handle: PrefetchHandle) -> bool:
        """Cancel ``handle``; returns True if a cache entry was removed."""
        with self._lock:
            if self.handles.get(handle.id) is not handle:
                raise ProtocolError(f"unknown prefetch handle {handle!r}")
            status = handle.status
            if status is PrefetchStatus.CANCELLED:
                return False
            handle.status = PrefetchStatus.CANCELLED
            if handle in self._queue:
                self._queue.remove(handle)
        removed = False
        if status is PrefetchStatus.DONE:
            try:
                removed = self.cache.discard(handle.id)
            except ProtocolViolation:
                removed = False
        self.trace.record("prefetch-cancel", handle.id, cycle=handle.for_cycle,
                          was=status.value, removed=removed)
        handle.done.set()
        return removed

    def _run(self):
        while True:
            with self._wake:
                self._wake.wait_for(lambda: self._queue or self._stop)
                if self._stop:
                    return
                h = self._queue[0]
            self.execute(h)

    def close(self):
        with self._wake:
            self._stop = True
            self._wake.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=5)
