"""Central coordinator: weight collection, cycle turnover, scheduling, recovery.

:class:`ServerCore` is the state machine.  It consumes decoded messages and
timer ticks and returns the messages to send, so it can be exercised without
sockets.  :func:`serve` wraps it in a single-threaded ``selectors`` loop.

Durability: every accepted weight is appended to ``journal_cycle_<t>.jsonl``
before it is acknowledged in the trace, and a JSON snapshot is rewritten at
each cycle start and every ``checkpoint_every`` weights.  Restoring replays
the journal over the snapshot, so no accepted task is ever recomputed.
"""

from __future__ import annotations

import json
import os
import selectors
import socket
import time
from dataclasses import dataclass
from pathlib import Path

from . import protocol as pr
from .config import ExperimentConfig, WorkPaths
from .errors import CheckpointError, DegenerateEnsembleError, ProtocolError
from .experiment import end_cycle, write_json_atomic
from .filtering import ResampleMultiset
from .scheduler import Scheduler
from .store import ParticleId
from .trace import Clock, TraceWriter

CHECKPOINT_FORMAT = "elasticpf-checkpoint"
CHECKPOINT_VERSION = 1
LAUNCHER = "launcher"

EXIT_OK = 0
EXIT_LAUNCHER_LOST = 3
EXIT_DEGENERATE = 5


@dataclass
class RunnerInfo:
    rid: int
    conn: int
    capacity: int
    last_seen: float
    exhausted_cycle: int = -1
    cancel_pending: object = None   # Assignment awaiting CANCEL_ACK
    steal_for: int | None = None    # idle runner meant to receive it
    retiring: bool = False


Outgoing = list  # of (conn_id, Message | None); None closes the connection


class ServerCore:
    def __init__(self, cfg: ExperimentConfig, paths: WorkPaths, trace: TraceWriter, *,
                 restore: bool = False, clock=time.monotonic):
        self.cfg = cfg
        self.paths = paths
        self.trace = trace
        self.clock = clock
        self.sched = Scheduler(cfg.P, cfg.seed, trace=trace)
        self.runners: dict[int, RunnerInfo] = {}
        self.conn_owner: dict[int, object] = {}
        self.lost: set[int] = set()
        self.launcher_conn: int | None = None
        self.launcher_seen: float | None = None
        self.phase = "propagating"
        self.exit_code: int | None = None
        self.source: ResampleMultiset | None = None
        self.since_checkpoint = 0
        self.handled = 0
        self.latencies: list[float] = []
        self._journal = None
        paths.make()
        if restore:
            self._restore()
        else:
            self._begin(1, ResampleMultiset.identity(cfg.P))

    # durability ----------------------------------------------------------

    @property
    def cycle(self) -> int:
        return self.sched.cycle

    def _snapshot_path(self) -> Path:
        return self.paths.checkpoint / "snapshot.json"

    def _journal_path(self, cycle: int) -> Path:
        return self.paths.checkpoint / f"journal_cycle_{cycle}.jsonl"

    def checkpoint(self) -> None:
        acc = self.sched.accepted
        write_json_atomic(self._snapshot_path(), {
            "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config_hash": self.cfg.hash(), "seed": self.cfg.seed,
            "cycle": self.cycle, "phase": self.phase,
            "multiset": self.source.as_dict(),
            "accepted": {str(k): acc[k] for k in sorted(acc)},
            "completed": [[self.cycle, k] for k in sorted(acc)],
        })
        self.since_checkpoint = 0
        self.trace.record("checkpoint", None, cycle=self.cycle, completed=len(acc))

    def _open_journal(self, cycle: int) -> None:
        if self._journal is not None:
            self._journal.close()
        self._journal = open(self._journal_path(cycle), "a", encoding="utf-8")

    def _journal_weight(self, k: int, w: float) -> None:
        self._journal.write(json.dumps({"k": k, "w": w}) + "\n")
        self._journal.flush()

    def _restore(self) -> None:
        try:
            snap = json.loads(self._snapshot_path().read_text())
        except FileNotFoundError:
            raise CheckpointError("no checkpoint to restore from") from None
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"unreadable checkpoint: {exc}") from None
        if snap.get("format") != CHECKPOINT_FORMAT or snap.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint format")
        if snap.get("config_hash") != self.cfg.hash():
            raise CheckpointError("checkpoint belongs to a different configuration")
        cycle = int(snap["cycle"])
        self.source = ResampleMultiset.from_dict(snap["multiset"])
        self.sched.begin_cycle(cycle, self.source)
        accepted = {int(k): float(w) for k, w in snap["accepted"].items()}
        jpath = self._journal_path(cycle)
        replayed = 0
        if jpath.exists():
            for line in jpath.read_text().splitlines():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn tail
                if rec["k"] not in accepted:
                    accepted[int(rec["k"])] = float(rec["w"])
                    replayed += 1
        for k in sorted(accepted):
            self.sched.mark_completed(k, accepted[k])
        self._open_journal(cycle)
        self.trace.record("restore", None, cycle=cycle, completed=len(accepted),
                          from_journal=replayed)
        if self.sched.complete():
            self._end_of_cycle()

    # cycle management -------------------------------------------------------

    def _begin(self, cycle: int, ms: ResampleMultiset) -> None:
        self.source = ms
        self.sched.begin_cycle(cycle, ms)
        self.phase = "propagating"
        self._open_journal(cycle)
        self.checkpoint()

    def _end_of_cycle(self) -> Outgoing:
        out: Outgoing = []
        t = self.cycle
        self.phase = "resampling"
        self.trace.record("cycle-end", None, cycle=t)
        self.trace.record("resample-start", None, cycle=t)
        try:
            res = end_cycle(t, self.sched.weights(), self.source, self.cfg.seed)
        except DegenerateEnsembleError as exc:
            self.trace.record("run-end", None, cycle=t, status="degenerate", error=str(exc))
            write_json_atomic(self.paths.results / "failed.json",
                              {"cycle": t, "error": f"degenerate weights: {exc}"})
            return self._shutdown_all("degenerate ensemble", EXIT_DEGENERATE)
        self.trace.record("resample-end", None, cycle=t, Q=res.multiset.Q, ms=res.resample_ms,
                          ess=res.ess)
        write_json_atomic(self.paths.cycle_result(t), res.to_dict())
        if t >= self.cfg.cycles:
            self.phase = "done"
            write_json_atomic(self.paths.complete_marker, {"cycles": t, "P": self.cfg.P,
                                                           "config_hash": self.cfg.hash()})
            self.trace.record("run-end", None, cycle=t, status="complete")
            return self._shutdown_all("experiment complete", EXIT_OK)
        self._begin(t + 1, res.multiset)
        if self.launcher_conn is not None:
            out.append((self.launcher_conn, pr.CheckpointAck(self.cycle, 0)))
        for rid in sorted(self.runners):
            out += self._fill(rid)
        return out

    def _shutdown_all(self, reason: str, code: int) -> Outgoing:
        out: Outgoing = []
        # the launcher hears first so it does not replace runners as they exit
        if self.launcher_conn is not None:
            out.append((self.launcher_conn, pr.Shutdown(reason)))
        for info in self.runners.values():
            out.append((info.conn, pr.Shutdown(reason)))
        self.exit_code = code
        if self._journal is not None:
            self._journal.close()
            self._journal = None
        return out

    # work distribution ----------------------------------------------------------

    def _fill(self, rid: int) -> Outgoing:
        info = self.runners.get(rid)
        if info is None or self.phase != "propagating":
            return []
        book = self.sched.runners[rid]
        out: Outgoing = []
        gave = dry = False
        while len(book.in_flight) < self.cfg.depth:
            a = self.sched.next_task(rid)
            if a is None:
                dry = True
                break
            gave = True
            out.append((info.conn, pr.Assign(a.task_index, a.parent, a.child, a.perturb_seed,
                                             a.siblings)))
            earlier = {b.parent for b in book.in_flight[:-1]}
            if earlier and a.parent not in book.cache and a.parent not in earlier:
                out.append((info.conn, pr.PrefetchHint(a.parent)))
        if gave:
            info.last_seen = self.clock()
        if dry and info.exhausted_cycle != self.cycle and not info.retiring:
            info.exhausted_cycle = self.cycle
            out.append((info.conn, pr.CycleExhausted(self.cycle)))
        if info.retiring and not book.in_flight:
            out += self._release(rid, "retired")
        return out

    def _release(self, rid: int, reason: str) -> Outgoing:
        info = self.runners.pop(rid)
        self.conn_owner.pop(info.conn, None)
        self.sched.on_runner_lost(rid, reason)
        self.lost.add(rid)
        self.trace.record("runner-retire", None, runner=rid, cycle=self.cycle)
        return [(info.conn, pr.Shutdown(reason))]

    def _wake_idle(self) -> Outgoing:
        out: Outgoing = []
        for rid in sorted(self.runners):
            if not self.sched.runners[rid].in_flight:
                out += self._fill(rid)
        return out + self._rebalance()

    def _rebalance(self) -> Outgoing:
        """Move queued, unstarted tasks to idle runners once the cycle is drained.

        Only load-neutral moves happen: the idle runner must already hold the
        task's parent, otherwise the steal would cost an extra global load.
        """
        if not self.cfg.rebalance or not self.sched.exhausted() or self.phase != "propagating":
            return []
        pending = {i.cancel_pending.parent for i in self.runners.values()
                   if i.cancel_pending is not None}
        idle = [r for r, i in self.runners.items()
                if not i.retiring and not self.sched.runners[r].in_flight]
        out: Outgoing = []
        for r in idle:
            cache = self.sched.runners[r].cache
            if cache & pending:
                continue
            donors = [(len(self.sched.runners[d].in_flight), -d) for d, i in self.runners.items()
                      if i.cancel_pending is None and len(self.sched.runners[d].in_flight) >= 2
                      and self.sched.runners[d].in_flight[-1].parent in cache]
            if not donors:
                continue
            rid = -max(donors)[1]
            a = self.sched.runners[rid].in_flight[-1]
            self.runners[rid].cancel_pending = a
            self.runners[rid].steal_for = r
            pending.add(a.parent)
            out.append((self.runners[rid].conn, pr.CancelPrefetch(a.parent)))
        return out

    # message handling ----------------------------------------------------

    def handle(self, conn: int, msg: pr.Message) -> Outgoing:
        t0 = time.perf_counter()
        try:
            return self._dispatch(conn, msg)
        finally:
            self.handled += 1
            if len(self.latencies) < 200_000:
                self.latencies.append(time.perf_counter() - t0)

    def _dispatch(self, conn: int, msg: pr.Message) -> Outgoing:
        now = self.clock()
        owner = self.conn_owner.get(conn)
        if isinstance(msg, pr.Heartbeat):
            if msg.sender == LAUNCHER or owner == LAUNCHER:
                self.conn_owner[conn] = LAUNCHER
                self.launcher_conn = conn
                self.launcher_seen = now
                return [(conn, pr.Heartbeat(msg.sequence))]
            if isinstance(owner, int) and owner in self.runners:
                self.runners[owner].last_seen = now
            return []
        if isinstance(msg, pr.Join):
            return self._join(conn, msg, now)
        if isinstance(msg, pr.RetireRunner):
            if owner != LAUNCHER:
                return self._violation(conn, "RETIRE_RUNNER from a runner")
            return self._retire(msg.runner_id)
        if not hasattr(msg, "runner_id") or isinstance(msg, pr.KillRunner):
            return self._violation(conn, f"unexpected {type(msg).__name__} from a peer")
        rid = msg.runner_id
        if owner != rid or rid not in self.runners:
            if rid in self.lost or owner is None:
                self.trace.record("weight-reject" if isinstance(msg, pr.Weight) else "message-ignored",
                                  getattr(msg, "child", None), runner=rid, reason="unregistered",
                                  message=type(msg).__name__)
                return []
            return self._violation(conn, f"runner id {rid} on a connection owned by {owner}")
        info = self.runners[rid]
        info.last_seen = now
        if isinstance(msg, pr.RequestWork):
            return self._fill(rid) + self._rebalance()
        if isinstance(msg, pr.Weight):
            return self._weight(info, msg)
        if isinstance(msg, pr.EvictRequest):
            self.sched.apply_cache_delta(rid, msg.added, msg.removed)
            victim = self.sched.select_eviction(rid)
            self.trace.record("evict-request", victim, runner=rid, cycle=self.cycle)
            return [(conn, pr.EvictDirective(victim))]
        if isinstance(msg, pr.CancelAck):
            return self._cancel_ack(info, msg)
        return self._violation(conn, f"unexpected {type(msg).__name__}")

    def _join(self, conn: int, msg: pr.Join, now: float) -> Outgoing:
        rid = msg.runner_id
        if rid in self.lost or rid in self.runners or conn in self.conn_owner:
            self.trace.record("protocol-error", None, runner=rid, reason="rejected join")
            return [(conn, pr.Shutdown("runner id not admissible")), (conn, None)]
        self.conn_owner[conn] = rid
        self.runners[rid] = RunnerInfo(rid, conn, msg.cache_capacity, now)
        self.sched.register(rid)
        self.trace.record("runner-join", None, runner=rid, cycle=self.cycle,
                          capacity=msg.cache_capacity)
        return []

    def _retire(self, rid: int) -> Outgoing:
        info = self.runners.get(rid)
        if info is None:
            return []
        info.retiring = True
        self.sched.retire(rid)
        if not self.sched.runners[rid].in_flight:
            return self._release(rid, "retired")
        return []

    def _weight(self, info: RunnerInfo, msg: pr.Weight) -> Outgoing:
        rid = info.rid
        if msg.weight < 0:
            return self._violation(info.conn, f"negative weight {msg.weight} for {msg.child}")
        self.sched.apply_cache_delta(rid, msg.added, msg.removed)
        try:
            status = self.sched.on_weight(rid, msg.child, msg.weight)
        except ProtocolError as exc:
            return self._violation(info.conn, str(exc))
        child = ParticleId(*msg.child)
        if status != "accepted":
            self.trace.record("weight-reject", child, cycle=child.cycle, runner=rid, reason=status)
            return self._fill(rid)
        self._journal_weight(child.index, msg.weight)
        self.trace.record("weight-accept", child, cycle=child.cycle, runner=rid, weight=msg.weight)
        out: Outgoing = []
        self.since_checkpoint += 1
        if self.sched.complete():
            return self._end_of_cycle()
        if self.since_checkpoint >= self.cfg.checkpoint_interval:
            self.checkpoint()
            if self.launcher_conn is not None:
                out.append((self.launcher_conn,
                            pr.CheckpointAck(self.cycle, len(self.sched.accepted))))
        out += self._fill(rid)
        return out + self._rebalance()

    def _cancel_ack(self, info: RunnerInfo, msg: pr.CancelAck) -> Outgoing:
        a, thief = info.cancel_pending, info.steal_for
        info.cancel_pending = info.steal_for = None
        self.trace.record("cancel-ack", msg.parent, runner=info.rid, revoked=msg.revoked,
                          cycle=self.cycle)
        book = self.sched.runners[info.rid]
        if not msg.revoked or a is None or a not in book.in_flight:
            return self._rebalance()
        self.sched.revoke(info.rid, a)
        out: Outgoing = []
        if thief in self.runners and not self.sched.runners[thief].in_flight:
            out = self._fill(thief)
        return out + self._wake_idle()

    def _violation(self, conn: int, reason: str) -> Outgoing:
        self.trace.record("protocol-error", None, reason=reason, conn=conn)
        out = self._drop_conn(conn, "protocol violation")
        return out + [(conn, None)]

    # failures --------------------------------------------------------------

    def _runner_lost(self, rid: int, reason: str) -> Outgoing:
        info = self.runners.pop(rid)
        self.lost.add(rid)
        self.sched.on_runner_lost(rid, reason)
        out: Outgoing = []
        if self.launcher_conn is not None:
            out.append((self.launcher_conn, pr.KillRunner(rid)))
        if self.phase == "propagating":
            out += self._wake_idle()
        return out

    def _drop_conn(self, conn: int, reason: str) -> Outgoing:
        owner = self.conn_owner.pop(conn, None)
        if owner == LAUNCHER:
            self.launcher_conn = None
            return []
        if isinstance(owner, int) and owner in self.runners:
            return self._runner_lost(owner, reason)
        return []

    def on_disconnect(self, conn: int) -> Outgoing:
        return self._drop_conn(conn, "disconnected")

    def protocol_error(self, conn: int, exc: Exception) -> Outgoing:
        """A frame on ``conn`` failed to decode: reject the connection."""
        self.trace.record("protocol-error", None, conn=conn, error=type(exc).__name__,
                          reason=str(exc))
        return self._drop_conn(conn, "protocol error") + [(conn, None)]

    def tick(self) -> Outgoing:
        now = self.clock()
        out: Outgoing = []
        limit = self.cfg.timeouts.propagation
        for rid in sorted(self.runners):
            info = self.runners.get(rid)
            if info is None or not self.sched.runners[rid].in_flight:
                continue
            if now - info.last_seen > limit:
                conn = info.conn
                out += self._runner_lost(rid, "timeout")
                self.conn_owner.pop(conn, None)
                out.append((conn, None))
        if self.launcher_seen is not None and self.exit_code is None:
            if now - self.launcher_seen > self.cfg.timeouts.launcher:
                self.trace.record("heartbeat-miss", None, peer=LAUNCHER,
                                  silent=round(now - self.launcher_seen, 3))
                self.checkpoint()
                out += self._shutdown_all("launcher lost", EXIT_LAUNCHER_LOST)
        return out


# event loop ------------------------------------------------------------------

class _Peer:
    __slots__ = ("sock", "frames", "cid")

    def __init__(self, sock, cid):
        self.sock, self.cid = sock, cid
        self.frames = pr.FrameBuffer()


def serve(cfg: ExperimentConfig, paths: WorkPaths, *, restore: bool = False,
          epoch_ns: int | None = None, incarnation: int = 0, host: str = "127.0.0.1",
          port: int = 0, tick: float = 0.05) -> int:
    clock = Clock(epoch_ns)
    trace = TraceWriter(paths.trace / f"server-{incarnation}.jsonl", "server", clock)
    trace.record("process-start", None, incarnation=incarnation, restore=restore)
    core = ServerCore(cfg, paths, trace, restore=restore)
    lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    lsock.bind((host, port))
    lsock.listen(256)
    lsock.setblocking(False)
    addr = f"{host}:{lsock.getsockname()[1]}"
    tmp = paths.address_file.with_suffix(".tmp")
    tmp.write_text(addr)
    os.replace(tmp, paths.address_file)

    sel = selectors.DefaultSelector()
    sel.register(lsock, selectors.EVENT_READ, None)
    peers: dict[int, _Peer] = {}
    next_cid = 1

    def close(cid: int) -> None:
        peer = peers.pop(cid, None)
        if peer is None:
            return
        try:
            sel.unregister(peer.sock)
        except (KeyError, ValueError):
            pass
        peer.sock.close()

    def deliver(out: Outgoing) -> None:
        # sends may fail for a peer that just died; its EOF arrives separately
        for cid, msg in out:
            peer = peers.get(cid)
            if peer is None:
                continue
            if msg is None:
                close(cid)
                continue
            try:
                peer.sock.sendall(pr.frame(msg))
            except OSError:
                pass

    while core.exit_code is None:
        for key, _ in sel.select(tick):
            if key.data is None:
                try:
                    sock, _ = lsock.accept()
                except OSError:
                    continue
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.setblocking(True)
                peers[next_cid] = _Peer(sock, next_cid)
                sel.register(sock, selectors.EVENT_READ, next_cid)
                next_cid += 1
                continue
            cid = key.data
            peer = peers.get(cid)
            if peer is None:
                continue
            try:
                data = peer.sock.recv(65536)
            except OSError:
                data = b""
            if not data:
                deliver(core.on_disconnect(cid))
                close(cid)
                continue
            try:
                for payload in peer.frames.feed(data):
                    msg = pr.decode(payload)
                    deliver(core.handle(cid, msg))
                    if cid not in peers or core.exit_code is not None:
                        break
            except (pr.DecodeError, pr.VersionError, pr.FrameError) as exc:
                deliver(core.protocol_error(cid, exc))
                close(cid)
            if core.exit_code is not None:
                break
        if core.exit_code is None:
            deliver(core.tick())
    # flush the farewell messages queued by the final transition
    for cid in list(peers):
        close(cid)
    sel.close()
    lsock.close()
    lat = sorted(core.latencies)
    trace.record("process-exit", None, code=core.exit_code, handled=core.handled,
                 median_latency_us=round(lat[len(lat) // 2] * 1e6, 1) if lat else None)
    trace.close()
    return core.exit_code
