"""Process supervisor for one experiment.

The launcher prepares the work directory, starts the server and the runners
as child processes, keeps the runner count at its target, carries out the
server's kill requests, applies scripted elasticity, and restarts the whole
framework from the server's checkpoint when the server dies.  It exchanges
heartbeats with the server over the ordinary control protocol.
"""

from __future__ import annotations

import collections
import os
import queue
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol as pr
from .config import ExperimentConfig, WorkPaths, dump_config
from .errors import ElasticPFError
from .experiment import prepare
from .trace import Clock, TraceWriter

EXIT_OK = 0
EXIT_ABORTED = 4


class LaunchError(ElasticPFError):
    pass


@dataclass
class ProcessRecord:
    role: str
    id: int
    proc: subprocess.Popen
    started: float
    restarts: int = 0
    retiring: bool = False

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None


@dataclass
class LaunchReport:
    exit_code: int
    runner_ids: list[int] = field(default_factory=list)
    server_starts: int = 0
    runner_replacements: int = 0
    wall_time: float = 0.0
    reason: str = ""


class Launcher:
    def __init__(self, cfg: ExperimentConfig, paths: WorkPaths | None = None, *,
                 python: str = sys.executable, poll: float = 0.02):
        self.cfg = cfg
        self.paths = paths or cfg.paths()
        self.python = python
        self.poll = poll
        self.clock = Clock()
        self.trace: TraceWriter | None = None
        self.server: ProcessRecord | None = None
        self.conn: pr.Connection | None = None
        self.inbox: queue.Queue = queue.Queue()
        self.runners: dict[int, ProcessRecord] = {}
        self.next_id = 0
        self.target = cfg.R
        self.incarnation = 0
        self.restart_times: collections.deque = collections.deque()
        self.kills_done: set[int] = set()
        self.elastic_done: set[int] = set()
        self.seq = 0
        self.last_echo = 0.0
        self.last_beat = 0.0
        self.finishing = False
        self.report = LaunchReport(exit_code=EXIT_ABORTED)
        self.t0 = 0.0

    # spawning -----------------------------------------------------------

    def _log(self, name: str):
        logs = self.paths.root / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        return open(logs / f"{name}.log", "ab")

    def _spawn(self, args: list[str], name: str) -> subprocess.Popen:
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parent.parent)
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        log = self._log(name)
        try:
            return subprocess.Popen([self.python, "-m", "elasticpf", *args], stdout=log,
                                    stderr=subprocess.STDOUT, env=env,
                                    start_new_session=True)
        finally:
            log.close()

    def _common(self) -> list[str]:
        return ["--work-dir", str(self.paths.root), "--epoch", str(self.clock.epoch_ns)]

    def start_server(self, restore: bool) -> None:
        addr_file = self.paths.address_file
        if addr_file.exists():
            addr_file.unlink()
        args = ["server", *self._common(), "--incarnation", str(self.incarnation)]
        if restore:
            args.append("--restore")
        proc = self._spawn(args, f"server-{self.incarnation}")
        self.server = ProcessRecord("server", self.incarnation, proc, time.monotonic())
        self.report.server_starts += 1
        self.trace.record("spawn", None, role="server", incarnation=self.incarnation,
                          restore=restore, pid=proc.pid)
        deadline = time.monotonic() + self.cfg.timeouts.startup
        while not addr_file.exists():
            if proc.poll() is not None:
                raise LaunchError(f"server exited during startup with code {proc.returncode}")
            if time.monotonic() > deadline:
                raise LaunchError("server did not publish its address in time")
            time.sleep(0.01)
        self.address = addr_file.read_text().strip()
        self.conn = pr.Connection.connect(self.address, "launcher")
        self.inbox = queue.Queue()
        threading.Thread(target=self._read_server, args=(self.conn, self.inbox),
                         daemon=True).start()
        self.last_echo = time.monotonic()
        self._beat()

    def _read_server(self, conn: pr.Connection, inbox: queue.Queue) -> None:
        while True:
            try:
                msg = conn.recv()
            except (OSError, ElasticPFError):
                msg = None
            inbox.put(msg)
            if msg is None:
                return

    def spawn_runner(self) -> int:
        rid = self.next_id
        self.next_id += 1
        proc = self._spawn(["runner", *self._common(), "--id", str(rid),
                            "--server", self.address], f"runner-{rid}")
        self.runners[rid] = ProcessRecord("runner", rid, proc, time.monotonic())
        self.report.runner_ids.append(rid)
        self.trace.record("spawn", None, role="runner", runner=rid, pid=proc.pid)
        return rid

    def _kill(self, rec: ProcessRecord, sig=signal.SIGKILL) -> None:
        if rec.alive:
            try:
                os.killpg(rec.proc.pid, sig)
            except (ProcessLookupError, PermissionError):
                pass

    # supervision --------------------------------------------------------------

    def _beat(self) -> None:
        self.seq += 1
        try:
            self.conn.send(pr.Heartbeat(self.seq))
        except OSError:
            pass
        self.last_beat = time.monotonic()

    def _note_restart(self) -> None:
        now = time.monotonic()
        self.restart_times.append(now)
        while self.restart_times and now - self.restart_times[0] > self.cfg.restart_window:
            self.restart_times.popleft()
        if len(self.restart_times) > self.cfg.max_restarts:
            raise LaunchError(f"{len(self.restart_times)} restarts within "
                              f"{self.cfg.restart_window:g} s; aborting")

    def _live_runners(self) -> list[ProcessRecord]:
        return [r for r in self.runners.values() if r.alive and not r.retiring]

    def _scale(self, target: int, why: str) -> None:
        if target < 1:
            raise LaunchError("runner target must be >= 1")
        self.trace.record("elasticity", None, target=target, previous=self.target, trigger=why)
        self.target = target
        live = sorted(self._live_runners(), key=lambda r: r.id)
        for rec in live[target:][::-1]:
            rec.retiring = True
            self.conn.send(pr.RetireRunner(rec.id))
        self._top_up()

    def _top_up(self) -> None:
        if self.finishing:
            return
        while len(self._live_runners()) < self.target:
            self.spawn_runner()

    def _on_server_message(self, msg) -> bool:
        """Returns False once the server connection is gone."""
        if msg is None:
            return False
        if isinstance(msg, pr.Heartbeat):
            self.last_echo = time.monotonic()
        elif isinstance(msg, pr.KillRunner):
            rec = self.runners.get(msg.runner_id)
            self.trace.record("kill", None, runner=msg.runner_id, requested_by="server")
            if rec is not None:
                self._kill(rec)
        elif isinstance(msg, pr.CheckpointAck):
            self._on_checkpoint(msg.cycle, msg.completed)
        elif isinstance(msg, pr.Shutdown):
            self.finishing = True
        return True

    def _on_checkpoint(self, cycle: int, completed: int) -> None:
        for i, k in enumerate(self.cfg.server_kills):
            if i not in self.kills_done and cycle == k.cycle and completed >= k.completed:
                self.kills_done.add(i)
                self.trace.record("failure-injected", None, mode="server-kill", cycle=cycle,
                                  completed=completed)
                self._kill(self.server)
        if completed == 0:
            for i, s in enumerate(self.cfg.elasticity):
                if i not in self.elastic_done and s.at_cycle is not None and s.at_cycle <= cycle:
                    self.elastic_done.add(i)
                    self._scale(s.scale_to, f"cycle {cycle}")

    def _restart_framework(self, why: str) -> None:
        self.trace.record("restart", None, reason=why, incarnation=self.incarnation + 1)
        self._note_restart()
        for rec in self.runners.values():
            self._kill(rec)
        if self.server is not None:
            self._kill(self.server)
            self.server.proc.wait()
        for rec in self.runners.values():
            rec.proc.wait()
        self.runners = {r: rec for r, rec in self.runners.items() if rec.alive}
        if self.conn is not None:
            self.conn.close()
        self.incarnation += 1
        restore = (self.paths.checkpoint / "snapshot.json").exists()
        self.start_server(restore=restore)
        self._top_up()

    def run(self) -> LaunchReport:
        cfg = self.cfg
        self.t0 = time.monotonic()
        prepare(cfg, self.paths)
        dump_config(cfg, self.paths.root / "config.yaml")
        self.trace = TraceWriter(self.paths.trace / "launcher.jsonl", "launcher", self.clock)
        self.trace.record("process-start", None, pid=os.getpid(), P=cfg.P, R=cfg.R)
        try:
            restore = (self.paths.checkpoint / "snapshot.json").exists()
            self.start_server(restore=restore)
            for _ in range(cfg.R):
                self.spawn_runner()
            self.report.exit_code = self._monitor()
        except LaunchError as exc:
            self.report.reason = str(exc)
            self.trace.record("run-end", None, status="aborted", reason=str(exc))
            self.report.exit_code = EXIT_ABORTED
        finally:
            self._reap_all()
            self.report.wall_time = time.monotonic() - self.t0
            self.trace.record("process-exit", None, code=self.report.exit_code,
                              wall=round(self.report.wall_time, 3))
            self.trace.close()
        return self.report

    def _monitor(self) -> int:
        cfg = self.cfg
        limit = cfg.timeouts.launcher
        while True:
            now = time.monotonic()
            connected = True
            while True:
                try:
                    msg = self.inbox.get_nowait()
                except queue.Empty:
                    break
                connected = self._on_server_message(msg) and connected
            # server liveness
            code = self.server.proc.poll()
            if code is not None or not connected:
                if code is None:
                    try:
                        code = self.server.proc.wait(timeout=max(limit, 1.0))
                    except subprocess.TimeoutExpired:
                        code = None
                if code == 0 and self.paths.complete_marker.exists():
                    self.finishing = True
                    self.trace.record("run-end", None, status="complete")
                    return EXIT_OK
                self._restart_framework(f"server exited with {code}")
                continue
            if now - self.last_echo > limit:
                self.trace.record("heartbeat-miss", None, peer="server",
                                  silent=round(now - self.last_echo, 3))
                self._restart_framework("server heartbeats missing")
                continue
            if now - self.last_beat >= cfg.timeouts.heartbeat_period:
                self._beat()
            # runners
            for rid, rec in list(self.runners.items()):
                rc = rec.proc.poll()
                if rc is None:
                    continue
                del self.runners[rid]
                self.trace.record("process-exit", None, role="runner", runner=rid, code=rc,
                                  retiring=rec.retiring)
                if not rec.retiring and not self.finishing:
                    self._note_restart()
                    self.report.runner_replacements += 1
            self._top_up()
            for i, s in enumerate(cfg.elasticity):
                if i not in self.elastic_done and s.at_time is not None \
                        and now - self.t0 >= s.at_time:
                    self.elastic_done.add(i)
                    self._scale(s.scale_to, f"time {s.at_time:g}")
            time.sleep(self.poll)

    def _reap_all(self, grace: float = 5.0) -> None:
        deadline = time.monotonic() + grace
        records = list(self.runners.values()) + ([self.server] if self.server else [])
        for rec in records:
            remaining = deadline - time.monotonic()
            try:
                rec.proc.wait(timeout=max(remaining, 0.01))
            except subprocess.TimeoutExpired:
                self._kill(rec)
                rec.proc.wait()
        if self.conn is not None:
            self.conn.close()


def launch(cfg: ExperimentConfig, work_dir: str | Path | None = None) -> LaunchReport:
    paths = cfg.paths(work_dir)
    return Launcher(cfg, paths).run()
