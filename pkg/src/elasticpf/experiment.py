"""Work-directory preparation and result access shared by every driver.

A run directory holds the twin-experiment truth, one observation file per
cycle, the initial ensemble in the global store, and per-cycle results
written by the server.  :func:`run_direct` computes the same numbers without
any processes; child ``(t, k)`` depends only on the seed and the cycle's
resampling multiset, so both drivers agree bit for bit.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models
from .config import ExperimentConfig, WorkPaths, dump_config
from .errors import ConfigError
from .filtering import ResampleMultiset, effective_sample_size, likelihood, normalize, resample
from .rng import Stream, derive_seed, task_seed
from .statefile import decode_state, encode_state
from .store import GlobalStore, ParticleId


def write_json_atomic(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(data, separators=(",", ":")))
    os.replace(tmp, path)


def truth_and_observations(cfg: ExperimentConfig):
    return models.generate_truth_and_observations(
        cfg.model, cfg.observation, cfg.obs_sigma, cfg.cycles, cfg.seed, cfg.truth_x0)


def prepare(cfg: ExperimentConfig, paths: WorkPaths | None = None) -> WorkPaths:
    """Write observations, truth and the cycle-0 ensemble; idempotent per config hash."""
    paths = paths or cfg.paths()
    marker = paths.root / "prepared.json"
    if marker.exists():
        info = json.loads(marker.read_text())
        if info.get("config_hash") != cfg.hash():
            raise ConfigError(f"{paths.root} was prepared for a different experiment")
        return paths
    paths.make()
    truth, obs = truth_and_observations(cfg)
    for t, y in enumerate(obs, start=1):
        paths.obs_file(t).write_bytes(encode_state(t, 0, y))
    write_json_atomic(paths.obs / "truth.json", [list(map(float, x)) for x in truth])
    store = GlobalStore(paths.store)
    for p, x in enumerate(models.initial_ensemble(cfg.P, cfg.model.d_x, cfg.prior_mean,
                                                  cfg.prior_std, cfg.seed)):
        store.stage(ParticleId(0, p), x)
    dump_config(cfg, paths.root / "config.yaml")
    write_json_atomic(marker, {"config_hash": cfg.hash(), "P": cfg.P, "cycles": cfg.cycles})
    return paths


def load_observation(paths: WorkPaths, cycle: int) -> np.ndarray:
    try:
        blob = paths.obs_file(cycle).read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"missing observation file for cycle {cycle}") from None
    c, _, y = decode_state(blob)
    if c != cycle:
        raise ConfigError(f"observation file for cycle {cycle} holds cycle {c}")
    return y


@dataclass
class CycleResult:
    cycle: int
    weights: list[float]
    normalized: list[float]
    multiset: ResampleMultiset      # drawn from this cycle's weights
    source: ResampleMultiset        # the one that produced this cycle's tasks
    ess: float
    resample_ms: float

    def to_dict(self) -> dict:
        return {"cycle": self.cycle, "weights": self.weights, "normalized": self.normalized,
                "multiset": self.multiset.as_dict(), "source": self.source.as_dict(),
                "ess": self.ess, "resample_ms": self.resample_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "CycleResult":
        return cls(d["cycle"], d["weights"], d["normalized"],
                   ResampleMultiset.from_dict(d["multiset"]),
                   ResampleMultiset.from_dict(d["source"]), d["ess"], d["resample_ms"])


def end_cycle(cycle: int, weights, source: ResampleMultiset, seed: int) -> CycleResult:
    """Normalise, resample with the cycle's seed and package the outcome."""
    t0 = time.perf_counter()
    w = normalize(weights)
    ms = resample(w, derive_seed(seed, Stream.RESAMPLE, cycle))
    dt = (time.perf_counter() - t0) * 1e3
    return CycleResult(cycle, [float(v) for v in weights], w.tolist(), ms, source,
                       effective_sample_size(w), dt)


def read_results(paths: WorkPaths) -> dict[int, CycleResult]:
    out = {}
    for f in sorted(paths.results.glob("cycle_*.json")):
        r = CycleResult.from_dict(json.loads(f.read_text()))
        out[r.cycle] = r
    return out


def posterior_means(paths: WorkPaths, results: dict[int, CycleResult] | None = None):
    """Weighted ensemble mean per cycle, read back from the global store."""
    results = results if results is not None else read_results(paths)
    store = GlobalStore(paths.store)
    means = {}
    for t, r in sorted(results.items()):
        w = np.asarray(r.normalized)
        X = np.stack([store.load(ParticleId(t, k)) for k in range(len(w))])
        means[t] = w @ X
    return means


def task_parents(ms: ResampleMultiset) -> np.ndarray:
    """Parent index of every task in the cycle: contiguous blocks, sorted by parent."""
    order = sorted(zip(ms.parents, ms.counts))
    return np.repeat([q for q, _ in order], [c for _, c in order])


def propagate_task(cfg: ExperimentConfig, parent_state, cycle: int, k: int,
                   siblings: int, *, realtime: bool = True) -> np.ndarray:
    """The per-task computation every runner performs, minus I/O."""
    x = parent_state
    if cfg.model.deterministic and siblings > 1 and cfg.perturbation > 0:
        x = models.perturb(x, cfg.perturbation, derive_seed(cfg.seed, Stream.PERTURB, cycle, k))
    return models.propagate(x, cfg.model, task_seed(cfg.seed, cycle, k), realtime=realtime)


@dataclass
class DirectRun:
    results: dict[int, CycleResult]
    means: dict[int, np.ndarray]
    truth: list
    observations: list


def run_direct(cfg: ExperimentConfig) -> DirectRun:
    """Execute the filter in-process with no scheduling or storage."""
    truth, obs = truth_and_observations(cfg)
    X = np.stack(models.initial_ensemble(cfg.P, cfg.model.d_x, cfg.prior_mean,
                                         cfg.prior_std, cfg.seed))
    source = ResampleMultiset.identity(cfg.P)
    results, means = {}, {}
    noise = cfg.noise
    for t in range(1, cfg.cycles + 1):
        parents = task_parents(source)
        counts = dict(zip(source.parents, source.counts))
        Xn = np.empty_like(X)
        w = np.empty(cfg.P)
        for k, q in enumerate(parents):
            x = propagate_task(cfg, X[q], t, k, counts[int(q)], realtime=False)
            Xn[k] = x
            w[k] = likelihood(models.observe(x, cfg.observation), obs[t - 1], noise)
        res = end_cycle(t, w.tolist(), source, cfg.seed)
        results[t] = res
        means[t] = np.asarray(res.normalized) @ Xn
        X, source = Xn, res.multiset
    return DirectRun(results, means, truth, obs)
