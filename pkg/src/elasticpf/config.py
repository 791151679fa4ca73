"""Experiment configuration: one YAML (or JSON) document per experiment.

See ``docs/protocol.md`` for the full schema.  Unknown keys are rejected so
typos surface before any process is spawned.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .filtering import NoiseSpec
from .models import ModelSpec, ObservationOperatorSpec


@dataclass(frozen=True)
class Timeouts:
    propagation: float = 5.0
    heartbeat_period: float = 0.5
    heartbeat_misses: int = 4
    startup: float = 30.0

    @property
    def launcher(self) -> float:
        return self.heartbeat_period * self.heartbeat_misses


@dataclass(frozen=True)
class RunnerFailure:
    """Crash or hang runner ``runner`` during ``cycle``.

    ``task`` is the 0-based count of propagations the runner has started in
    that cycle, or ``"last"``: the moment it learns the cycle has no more work
    while still propagating its final task.
    """

    runner: int
    cycle: int
    task: int | str = 0
    mode: str = "crash"


@dataclass(frozen=True)
class ServerKill:
    """SIGKILL the server once it checkpoints ``completed`` weights of ``cycle``."""

    cycle: int
    completed: int = 1


@dataclass(frozen=True)
class ScaleStep:
    scale_to: int
    at_cycle: int | None = None
    at_time: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    P: int
    R: int
    cycles: int
    model: ModelSpec
    observation: ObservationOperatorSpec = field(default_factory=ObservationOperatorSpec)
    obs_sigma: float = 1.0
    prior_mean: float = 0.0
    prior_std: float = 1.0
    truth_x0: tuple[float, ...] | None = None
    seed: int = 0
    name: str = "experiment"
    cache_capacity: int = 0
    lookahead: int = 1
    helper_queue: int = 16
    rebalance: bool = True
    perturbation: float = 0.0
    realtime: bool = True
    timeouts: Timeouts = field(default_factory=Timeouts)
    checkpoint_every: int | None = None
    runner_failures: tuple[RunnerFailure, ...] = ()
    server_kills: tuple[ServerKill, ...] = ()
    elasticity: tuple[ScaleStep, ...] = ()
    max_restarts: int = 20
    restart_window: float = 60.0
    fuzz_protocol: bool = False
    work_dir: str = "run"

    def __post_init__(self):
        for name in ("P", "R", "cycles"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.cache_capacity < 0:
            raise ConfigError("cache_capacity must be >= 0 (0 disables the cache)")
        if 0 < self.cache_capacity < 3:
            raise ConfigError("an enabled cache needs capacity >= 3 "
                              "(working parent, queued parent and one child)")
        if self.lookahead not in (0, 1):
            raise ConfigError("lookahead must be 0 or 1")
        if self.helper_queue < 2:
            raise ConfigError("helper_queue must be >= 2")
        if self.obs_sigma <= 0:
            raise ConfigError("obs_sigma must be positive")
        if self.prior_std < 0 or self.perturbation < 0:
            raise ConfigError("prior_std and perturbation must be non-negative")
        if self.truth_x0 is not None and len(self.truth_x0) != self.model.d_x:
            raise ConfigError(f"truth.x0 has {len(self.truth_x0)} entries, d_x={self.model.d_x}")
        if self.observation.kind == "subsample" and max(self.observation.indices) >= self.model.d_x:
            raise ConfigError("observed index out of range")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint.every must be positive")
        for f in self.runner_failures:
            if f.mode not in ("crash", "hang"):
                raise ConfigError(f"unknown failure mode {f.mode!r}")
            if not (f.task == "last" or (isinstance(f.task, int) and f.task >= 0)):
                raise ConfigError(f"failure task must be 'last' or a count, got {f.task!r}")
            if not 1 <= f.cycle <= self.cycles:
                raise ConfigError(f"failure cycle {f.cycle} outside 1..{self.cycles}")
        for s in self.elasticity:
            if s.scale_to < 1:
                raise ConfigError("elasticity target must be >= 1")
            if (s.at_cycle is None) == (s.at_time is None):
                raise ConfigError("each elasticity step needs exactly one of at_cycle/at_time")
        t = self.timeouts
        if t.propagation <= 0 or t.heartbeat_period <= 0 or t.heartbeat_misses < 1:
            raise ConfigError("timeouts must be positive")

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.obs_sigma)

    @property
    def depth(self) -> int:
        """Assignments a runner may hold: the running one plus lookahead."""
        return 1 + self.lookahead

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or max(1, self.P // 4)

    def result_fields(self) -> dict:
        """Everything that determines the filter's numbers (not its execution)."""
        return {
            "P": self.P, "cycles": self.cycles, "seed": self.seed,
            "model": self.model.to_dict(), "observation": self.observation.to_dict(),
            "obs_sigma": self.obs_sigma, "prior_mean": self.prior_mean,
            "prior_std": self.prior_std,
            "truth_x0": None if self.truth_x0 is None else list(self.truth_x0),
            "perturbation": self.perturbation,
        }

    def hash(self) -> str:
        blob = json.dumps(self.result_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def paths(self, work_dir: str | Path | None = None) -> "WorkPaths":
        return WorkPaths(Path(work_dir if work_dir is not None else self.work_dir))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {
            "name": self.name, "P": self.P, "R": self.R, "cycles": self.cycles,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "observation": {"operator": self.observation.to_dict(), "sigma": self.obs_sigma},
            "prior": {"mean": self.prior_mean, "std": self.prior_std},
            "cache": {"capacity": self.cache_capacity, "lookahead": self.lookahead,
                      "helper_queue": self.helper_queue},
            "scheduler": {"rebalance": self.rebalance},
            "perturbation": self.perturbation,
            "realtime": self.realtime,
            "timeouts": asdict(self.timeouts),
            "checkpoint": {"every": self.checkpoint_every},
            "failures": {
                "runners": [asdict(f) for f in self.runner_failures],
                "server_kills": [asdict(k) for k in self.server_kills],
            },
            "elasticity": [{k: v for k, v in asdict(s).items() if v is not None}
                           for s in self.elasticity],
            "restart": {"max_restarts": self.max_restarts, "window": self.restart_window},
            "fuzz_protocol": self.fuzz_protocol,
            "work_dir": self.work_dir,
        }
        if self.truth_x0 is not None:
            d["truth"] = {"x0": list(self.truth_x0)}
        return d


@dataclass(frozen=True)
class WorkPaths:
    root: Path

    @property
    def store(self) -> Path:
        return self.root / "store"

    @property
    def obs(self) -> Path:
        return self.root / "obs"

    @property
    def trace(self) -> Path:
        return self.root / "trace"

    @property
    def results(self) -> Path:
        return self.root / "results"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoint"

    @property
    def address_file(self) -> Path:
        return self.root / "server.addr"

    @property
    def complete_marker(self) -> Path:
        return self.results / "complete.json"

    def obs_file(self, cycle: int) -> Path:
        return self.obs / f"cycle_{cycle}.bin"

    def cycle_result(self, cycle: int) -> Path:
        return self.results / f"cycle_{cycle}.json"

    def make(self) -> None:
        for p in (self.store, self.obs, self.trace, self.results, self.checkpoint):
            p.mkdir(parents=True, exist_ok=True)


_TOP_KEYS = {"name", "P", "R", "cycles", "seed", "model", "observation", "prior", "truth",
             "cache", "scheduler", "perturbation", "realtime", "timeouts", "checkpoint",
             "failures", "elasticity", "restart", "fuzz_protocol", "work_dir"}


def _section(d: dict, key: str, allowed: set[str]) -> dict:
    sec = d.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"unknown keys in '{key}': {sorted(extra)}")
    return sec


def from_dict(d: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    extra = set(d) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    for key in ("P", "R", "cycles", "model"):
        if key not in d:
            raise ConfigError(f"missing required key '{key}'")
    m = _section(d, "model", {"kind", "d_x", "process_noise_sigma", "params", "steps_per_cycle"})
    obs = _section(d, "observation", {"operator", "sigma"})
    op = obs.get("operator") or {}
    prior = _section(d, "prior", {"mean", "std"})
    truth = _section(d, "truth", {"x0"})
    cache = _section(d, "cache", {"capacity", "lookahead", "helper_queue"})
    sched = _section(d, "scheduler", {"rebalance"})
    tmo = _section(d, "timeouts", {"propagation", "heartbeat_period", "heartbeat_misses", "startup"})
    ckpt = _section(d, "checkpoint", {"every"})
    fail = _section(d, "failures", {"runners", "server_kills"})
    restart = _section(d, "restart", {"max_restarts", "window"})
    try:
        model = ModelSpec(kind=m.get("kind"), d_x=int(m.get("d_x", 1)),
                          process_noise_sigma=float(m.get("process_noise_sigma", 0.0)),
                          params=dict(m.get("params") or {}),
                          steps_per_cycle=int(m.get("steps_per_cycle", 1)))
        operator = ObservationOperatorSpec(kind=op.get("kind", "identity"),
                                           indices=op.get("indices"))
        return ExperimentConfig(
            P=d["P"], R=d["R"], cycles=d["cycles"], model=model, observation=operator,
            obs_sigma=float(obs.get("sigma", 1.0)),
            prior_mean=float(prior.get("mean", 0.0)), prior_std=float(prior.get("std", 1.0)),
            truth_x0=None if truth.get("x0") is None else tuple(float(v) for v in truth["x0"]),
            seed=int(d.get("seed", 0)), name=str(d.get("name", "experiment")),
            cache_capacity=int(cache.get("capacity", 0)),
            lookahead=int(cache.get("lookahead", 1)),
            helper_queue=int(cache.get("helper_queue", 16)),
            rebalance=bool(sched.get("rebalance", True)),
            perturbation=float(d.get("perturbation", 0.0)),
            realtime=bool(d.get("realtime", True)),
            timeouts=Timeouts(**{k: (int(v) if k == "heartbeat_misses" else float(v))
                                 for k, v in tmo.items()}),
            checkpoint_every=ckpt.get("every"),
            runner_failures=tuple(RunnerFailure(**f) for f in fail.get("runners") or ()),
            server_kills=tuple(ServerKill(**k) for k in fail.get("server_kills") or ()),
            elasticity=tuple(ScaleStep(**s) for s in d.get("elasticity") or ()),
            max_restarts=int(restart.get("max_restarts", 20)),
            restart_window=float(restart.get("window", 60.0)),
            fuzz_protocol=bool(d.get("fuzz_protocol", False)),
            work_dir=str(d.get("work_dir", "run")),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
