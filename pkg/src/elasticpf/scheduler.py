"""Server-side assignment of propagation tasks to runners.

Dynamic list scheduling guided by split factors, made cache aware.  For a
requesting runner the parent is chosen by the first rule that matches:

0. the parent it was last given, while its claim on that parent lasts;
1. a parent held in its cache whose work is not fully claimed;
2. a parent in no runner's cache whose work is not fully claimed;
3. any parent whose work is not fully claimed;
4. the parent with the largest split factor, taking work claimed by others.

A runner that picks a new parent claims up to its fair share of the cycle's
remaining work on it.  The split factor of a parent is the number of runners
holding a claim plus the runners still needed for its unclaimed work, so
"fewer runners than the split factor" is the same as "unclaimed work left".
With equal durations and a fixed runner set every runner ends with at most one
partially covered parent, which keeps global loads within ``Q + R - 1``.

Task indices are laid out in contiguous blocks per parent (sorted by parent
index) at the start of a cycle, so child ``(t, k)`` always descends from the
same parent no matter which runner computes it.
"""

from __future__ import annotations

import bisect
import heapq
from dataclasses import dataclass, field
from typing import Iterable

from .errors import InvalidMultisetError, ProtocolError
from .filtering import ResampleMultiset
from .rng import Stream, derive_seed, generator
from .store import ParticleId
from .trace import NullTrace, TraceWriter


def split_factor(alpha_q: int, P: int, R: int) -> int:
    """``ceil(alpha_q / (P / R))`` in exact integer arithmetic; R is clamped to P."""
    if alpha_q < 1 or P < 1 or R < 1:
        raise ValueError("split_factor arguments must be positive")
    R = min(R, P)
    return -(-alpha_q * R // P)


def load_bounds(Q: int, R: int) -> tuple[int, int]:
    """Lower and upper bound on global loads for a static, cacheless cycle."""
    if Q < 1 or R < 1:
        raise ValueError("Q and R must be positive")
    return Q, Q + R - 1


@dataclass(frozen=True)
class Assignment:
    task_index: int
    parent: ParticleId
    child: ParticleId
    perturb_seed: int
    siblings: int = 1


@dataclass
class TaskEntry:
    parent: ParticleId
    total: int
    remaining: int
    first_index: int
    free: list[int] = field(default_factory=list)
    assigned_runners: dict = field(default_factory=dict)  # runner -> claimed tasks left
    in_flight: int = 0
    completed: int = 0

    @property
    def unclaimed(self) -> int:
        return self.remaining - sum(self.assigned_runners.values())


@dataclass
class RunnerBook:
    runner_id: int
    cache: set = field(default_factory=set)
    in_flight: list = field(default_factory=list)
    last_parent: ParticleId | None = None
    retiring: bool = False
    assigned: int = 0


class Scheduler:
    """Bookkeeping for one ensemble: tasks, runners and their cache mirrors."""

    def __init__(self, P: int, seed: int = 0, trace: TraceWriter | None = None):
        if P < 1:
            raise ValueError("P must be positive")
        self.P = P
        self.seed = seed
        self.trace = trace or NullTrace()
        self.cycle = 0
        self.entries: dict[ParticleId, TaskEntry] = {}
        self.runners: dict[int, RunnerBook] = {}
        self.accepted: dict[int, float] = {}
        self.remaining_total = 0
        self._order: list[ParticleId] = []
        self._live: list[ParticleId] = []
        self._heap: list[tuple[int, ParticleId]] = []  # (-unclaimed, parent), lazily pruned
        self._index_parent: list[ParticleId] = []
        self._eviction_draws = 0
        self.stats = {"rule": [0, 0, 0, 0, 0]}

    # runners -----------------------------------------------------------

    @property
    def R(self) -> int:
        return sum(1 for r in self.runners.values() if not r.retiring)

    def register(self, runner_id: int) -> RunnerBook:
        book = self.runners.get(runner_id)
        if book is None:
            book = self.runners[runner_id] = RunnerBook(runner_id)
        return book

    def retire(self, runner_id: int) -> None:
        """Stop giving work to a runner that is about to leave."""
        book = self._book(runner_id)
        book.retiring = True
        self._drop_claims(runner_id)

    def _book(self, runner_id: int) -> RunnerBook:
        try:
            return self.runners[runner_id]
        except KeyError:
            raise ProtocolError(f"unknown runner {runner_id}") from None

    def apply_cache_delta(self, runner_id: int, added: Iterable, removed: Iterable) -> None:
        book = self._book(runner_id)
        book.cache.difference_update(ParticleId(*p) for p in removed)
        book.cache.update(ParticleId(*p) for p in added)

    def on_runner_lost(self, runner_id: int, reason: str = "lost") -> list[Assignment]:
        """Deregister a runner and put its unfinished tasks back in play."""
        book = self.runners.pop(runner_id, None)
        if book is None:
            self.trace.record("runner-lost", None, runner=runner_id, known=False, reason=reason)
            return []
        back = list(book.in_flight)
        for a in back:
            self._reintegrate(a)
        self._drop_claims(runner_id)
        self.trace.record("runner-lost", None, runner=runner_id, known=True, cycle=self.cycle,
                          reason=reason, reintegrated=[a.task_index for a in back])
        return back

    def _drop_claims(self, runner_id: int) -> None:
        for entry in self.entries.values():
            if entry.assigned_runners.pop(runner_id, None) is not None:
                self._touch(entry)

    def revoke(self, runner_id: int, assignment: Assignment) -> None:
        """Take back a not-yet-started assignment (end-of-cycle rebalancing)."""
        book = self._book(runner_id)
        book.in_flight.remove(assignment)
        book.assigned -= 1
        self._reintegrate(assignment)
        if book.last_parent == assignment.parent:
            book.last_parent = book.in_flight[-1].parent if book.in_flight else None

    def _reintegrate(self, a: Assignment) -> None:
        if a.child.cycle != self.cycle or a.task_index in self.accepted:
            return
        entry = self.entries[a.parent]
        if entry.remaining == 0:
            bisect.insort(self._live, a.parent)
        entry.remaining += 1
        entry.in_flight -= 1
        self.remaining_total += 1
        bisect.insort(entry.free, a.task_index)
        self._touch(entry)

    # cycles ------------------------------------------------------------

    def begin_cycle(self, cycle: int, multiset: ResampleMultiset, parent_cycle: int | None = None):
        if sum(multiset.counts) != self.P:
            raise InvalidMultisetError(
                f"multiset holds {sum(multiset.counts)} propagations, expected {self.P}")
        multiset.validate(self.P)
        parent_cycle = cycle - 1 if parent_cycle is None else parent_cycle
        self.cycle = cycle
        self.entries = {}
        self.accepted = {}
        self._order = []
        self._index_parent = []
        start = 0
        for q, count in sorted(zip(multiset.parents, multiset.counts)):
            pid = ParticleId(parent_cycle, q)
            self.entries[pid] = TaskEntry(pid, count, count, start, list(range(start, start + count)))
            self._order.append(pid)
            self._index_parent.extend([pid] * count)
            start += count
        self._live = list(self._order)
        self._heap = [(-self.entries[p].remaining, p) for p in self._order]
        heapq.heapify(self._heap)
        self.remaining_total = self.P
        for book in self.runners.values():
            book.in_flight = []
            book.last_parent = None
            book.assigned = 0
        self.trace.record("cycle-begin", None, cycle=cycle, Q=len(self.entries), R=self.R, P=self.P)

    def parent_of(self, task_index: int) -> ParticleId:
        return self._index_parent[task_index]

    def exhausted(self) -> bool:
        return self.remaining_total == 0

    def complete(self) -> bool:
        return len(self.accepted) == self.P

    def weights(self) -> list[float]:
        return [self.accepted[k] for k in range(self.P)]

    # selection ---------------------------------------------------------

    def share(self, book: RunnerBook) -> int:
        """Tasks this runner should still receive in the current cycle."""
        active = [b for b in self.runners.values() if not b.retiring]
        R = max(min(len(active), self.P), 1)
        planned = self.remaining_total + sum(b.assigned for b in active)
        return max(1, -(-planned // R) - book.assigned)

    def split(self, entry: TaskEntry, share: int | None = None) -> int:
        """Runners holding a claim on ``entry`` plus runners its unclaimed work needs."""
        if share is None:
            active = max(min(self.R, self.P), 1)
            share = max(1, self.remaining_total // active)
        unclaimed = entry.unclaimed
        need = -(-unclaimed // share) if unclaimed > 0 else 0
        return len(entry.assigned_runners) + need

    def _touch(self, entry: TaskEntry) -> None:
        if entry.remaining > 0:
            heapq.heappush(self._heap, (-entry.unclaimed, entry.parent))

    def _best_unclaimed(self, share: int, excluded: set) -> TaskEntry | None:
        """Same choice as scanning every live parent outside ``excluded`` for
        the largest ``min(unclaimed, share)``, lowest index on ties."""
        heap, entries = self._heap, self.entries
        popped, seen = [], set()
        best = None
        while heap:
            u, pid = heap[0]
            e = entries.get(pid)
            if e is None or e.remaining == 0 or -u != e.unclaimed or pid in seen:
                heapq.heappop(heap)
                continue
            u = -u
            if u <= 0 or (best is not None and u < share):
                break
            popped.append(heapq.heappop(heap))
            seen.add(pid)
            if pid in excluded:
                continue
            if u < share:
                best = e
                break
            if best is None or pid < best.parent:
                best = e
        for item in popped:
            heapq.heappush(heap, item)
        return best

    def _cached_anywhere(self) -> set:
        s = set()
        for book in self.runners.values():
            s |= book.cache
            s.update(a.parent for a in book.in_flight)
        return s

    def select_parent(self, book: RunnerBook) -> tuple[TaskEntry | None, int]:
        entries = self.entries
        if book.last_parent is not None:
            e = entries.get(book.last_parent)
            if e is not None and e.assigned_runners.get(book.runner_id, 0) > 0:
                return e, 0
        share = self.share(book)

        def fill(pids):
            # the parent covering most of this runner's share; lowest index on ties
            best, best_cover = None, 0
            for pid in pids:
                e = entries.get(pid)
                if e is None:
                    continue
                cover = min(e.unclaimed, share)
                if cover > best_cover or (cover == best_cover and cover > 0 and pid < best.parent):
                    best, best_cover = e, cover
            return best

        best = fill(book.cache)
        if best is not None:
            return best, 1
        if not self._live:
            return None, -1
        best = self._best_unclaimed(share, self._cached_anywhere())
        if best is not None:
            return best, 2
        best = self._best_unclaimed(share, set())
        if best is not None:
            return best, 3
        top = max((entries[p] for p in self._live),
                  key=lambda e: (self.split(e), e.remaining, -e.parent.index))
        return top, 4

    def next_task(self, runner_id: int) -> Assignment | None:
        """Allocate the next task for ``runner_id``; ``None`` means cycle exhausted."""
        book = self._book(runner_id)
        if book.retiring:
            return None
        entry, rule = self.select_parent(book)
        if entry is None:
            return None
        claims = entry.assigned_runners
        if rule in (1, 2, 3):
            if book.last_parent is not None and book.last_parent != entry.parent:
                old = self.entries.get(book.last_parent)
                if old is not None and old.assigned_runners.pop(runner_id, None) is not None:
                    self._touch(old)
            claims[runner_id] = claims.get(runner_id, 0) + min(entry.unclaimed, self.share(book))
        if rule == 4:
            # take work another runner claimed, shrinking the largest claim
            if sum(claims.values()) >= entry.remaining:
                victim = max(claims, key=lambda r: (claims[r], -r))
                claims[victim] -= 1
                if claims[victim] == 0:
                    del claims[victim]
        else:
            claims[runner_id] -= 1
            if claims[runner_id] == 0:
                del claims[runner_id]
        k = entry.free.pop(0)
        entry.remaining -= 1
        if entry.remaining == 0:
            del self._live[bisect.bisect_left(self._live, entry.parent)]
        self._touch(entry)
        entry.in_flight += 1
        self.remaining_total -= 1
        book.last_parent = entry.parent
        book.assigned += 1
        a = Assignment(k, entry.parent, ParticleId(self.cycle, k),
                       derive_seed(self.seed, Stream.PERTURB, self.cycle, k), entry.total)
        book.in_flight.append(a)
        self.stats["rule"][rule] += 1
        self.trace.record("assign", a.child, cycle=self.cycle, runner=runner_id,
                          parent=list(a.parent), rule=rule)
        return a

    def on_weight(self, runner_id: int, child: ParticleId, weight: float) -> str:
        """Record a weight; returns 'accepted', 'duplicate', 'stale' or 'unregistered'.

        Raises :class:`ProtocolError` for a current-cycle task that this runner
        was never given.
        """
        child = ParticleId(*child)
        if child.cycle != self.cycle:
            return "stale"
        if child.index in self.accepted:
            return "duplicate"
        book = self.runners.get(runner_id)
        if book is None:
            return "unregistered"
        match = next((a for a in book.in_flight if a.child == child), None)
        if match is None:
            raise ProtocolError(f"runner {runner_id} reported {child} which it was not assigned")
        book.in_flight.remove(match)
        entry = self.entries[match.parent]
        entry.in_flight -= 1
        entry.completed += 1
        self.accepted[child.index] = float(weight)
        return "accepted"

    # eviction ----------------------------------------------------------

    def select_eviction(self, runner_id: int) -> ParticleId | None:
        book = self._book(runner_id)
        needed = {a.parent for a in book.in_flight}
        candidates = sorted(p for p in book.cache if p not in needed)
        if not candidates:
            return None
        parent_cycle = self.cycle - 1
        choice = None
        for p in candidates:  # 1: discarded by resampling, or older
            if p.cycle < parent_cycle or (p.cycle == parent_cycle and p not in self.entries):
                choice = p
                break
        if choice is None:  # 2: parent whose propagations are all done
            for p in candidates:
                e = self.entries.get(p)
                if e is not None and e.remaining == 0 and e.in_flight == 0:
                    choice = p
                    break
        if choice is None:  # 3: lowest-weight child of this cycle
            weighted = [(self.accepted[p.index], p) for p in candidates
                        if p.cycle == self.cycle and p.index in self.accepted]
            if weighted:
                choice = min(weighted)[1]
        if choice is None:  # 4: random
            self._eviction_draws += 1
            rng = generator(derive_seed(self.seed, Stream.EVICTION, self.cycle, runner_id,
                                        self._eviction_draws))
            choice = candidates[int(rng.integers(len(candidates)))]
        book.cache.discard(choice)
        return choice

    # checkpoint support ---------------------------------------------------

    def mark_completed(self, task_index: int, weight: float) -> None:
        """Record a weight restored from a checkpoint without any runner."""
        if task_index in self.accepted:
            return
        pid = self._index_parent[task_index]
        entry = self.entries[pid]
        entry.free.remove(task_index)
        entry.remaining -= 1
        entry.completed += 1
        if entry.remaining == 0:
            del self._live[bisect.bisect_left(self._live, pid)]
        self._touch(entry)
        self.remaining_total -= 1
        self.accepted[task_index] = float(weight)

    def completed_indices(self) -> list[int]:
        return sorted(self.accepted)
