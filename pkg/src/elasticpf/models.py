"""Toy forecast models standing in for a real geophysical code.

Three models share one interface: :func:`propagate` advances a state over one
assimilation cycle, :func:`observe` projects it into observation space, and
:func:`perturb` jitters siblings of a deterministic model.  Every random draw
is keyed by an explicit seed, so a task recomputed on another runner yields
the same bits.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, NumericDivergenceError, NumericError, ShapeError
from .rng import Stream, derive_seed, generator

MODEL_KINDS = ("linear-gaussian", "lorenz96", "synthetic-delay")

_DEFAULT_PARAMS = {
    "linear-gaussian": {"a": 1.0},
    "lorenz96": {"F": 8.0, "dt": 0.05},
    "synthetic-delay": {"base_ms": 10.0, "jitter_ms": 0.0},
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d_x: int = 1
    process_noise_sigma: float = 0.0
    params: dict[str, Any] = field(default_factory=dict)
    steps_per_cycle: int = 1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.d_x < 1:
            raise ConfigError("d_x must be positive")
        if self.steps_per_cycle < 1:
            raise ConfigError("steps_per_cycle must be positive")
        if not (self.process_noise_sigma >= 0):
            raise ConfigError("process_noise_sigma must be non-negative")
        merged = {**_DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        if self.kind == "lorenz96":
            if self.d_x < 4:
                raise ConfigError("lorenz96 needs d_x >= 4")
            if merged["dt"] <= 0:
                raise ConfigError("lorenz96 dt must be positive")
        if self.kind == "synthetic-delay":
            if merged["base_ms"] < 0 or merged["jitter_ms"] < 0:
                raise ConfigError("synthetic-delay timings must be non-negative")

    @property
    def deterministic(self) -> bool:
        return self.process_noise_sigma == 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d_x": self.d_x,
            "process_noise_sigma": self.process_noise_sigma,
            "params": dict(self.params),
            "steps_per_cycle": self.steps_per_cycle,
        }


@dataclass(frozen=True)
class ObservationOperatorSpec:
    kind: str = "identity"
    indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "subsample"):
            raise ConfigError(f"unknown observation operator {self.kind!r}")
        if self.kind == "subsample":
            if not self.indices:
                raise ConfigError("subsample operator needs indices")
            idx = tuple(int(i) for i in self.indices)
            if len(set(idx)) != len(idx):
                raise ConfigError("duplicate observed indices")
            object.__setattr__(self, "indices", idx)

    def dim(self, d_x: int) -> int:
        return d_x if self.kind == "identity" else len(self.indices)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.indices is not None:
            d["indices"] = list(self.indices)
        return d


def _l96_rhs(x: np.ndarray, F: float) -> np.ndarray:
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + F


def _rk4(x: np.ndarray, F: float, dt: float) -> np.ndarray:
    k1 = _l96_rhs(x, F)
    k2 = _l96_rhs(x + 0.5 * dt * k1, F)
    k3 = _l96_rhs(x + 0.5 * dt * k2, F)
    k4 = _l96_rhs(x + dt * k3, F)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def synthetic_duration(model: ModelSpec, task_seed: int) -> float:
    """Seconds a synthetic-delay propagation takes for this seed."""
    base = model.params["base_ms"]
    jitter = model.params["jitter_ms"]
    extra = generator(derive_seed(task_seed, Stream.PROPAGATE, 0)).uniform(0.0, jitter) if jitter else 0.0
    return (base + extra) / 1000.0


def propagate(state, model: ModelSpec, task_seed: int, *, realtime: bool = True) -> np.ndarray:
    """Advance ``state`` by one assimilation cycle.

    ``realtime=False`` skips the synthetic-delay sleep; the returned state is
    identical either way.
    """
    x = np.array(state, dtype=np.float64)
    if x.shape != (model.d_x,):
        raise ShapeError(f"state has shape {x.shape}, model expects ({model.d_x},)")
    rng = generator(task_seed)
    sigma = model.process_noise_sigma
    if model.kind == "linear-gaussian":
        a = model.params["a"]
        for _ in range(model.steps_per_cycle):
            x = a * x
            if sigma:
                x = x + sigma * rng.standard_normal(model.d_x)
    elif model.kind == "lorenz96":
        F, dt = model.params["F"], model.params["dt"]
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(model.steps_per_cycle):
                x = _rk4(x, F, dt)
        if sigma:
            x = x + sigma * rng.standard_normal(model.d_x)
    else:
        if realtime:
            time.sleep(synthetic_duration(model, task_seed))
        x[0] += model.steps_per_cycle
        if sigma and model.d_x > 1:
            for _ in range(model.steps_per_cycle):
                x[1:] += sigma * rng.standard_normal(model.d_x - 1)
    if not np.all(np.isfinite(x)):
        raise NumericDivergenceError(f"{model.kind} state diverged")
    return x


def observe(state, op: ObservationOperatorSpec) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)
    if op.kind == "identity":
        return x.copy()
    if max(op.indices) >= x.size or min(op.indices) < 0:
        raise ShapeError(f"observed indices {op.indices} out of range for d_x={x.size}")
    return x[list(op.indices)]


def perturb(state, magnitude: float, seed: int) -> np.ndarray:
    if magnitude < 0:
        raise ValueError("perturbation magnitude must be non-negative")
    x = np.asarray(state, dtype=np.float64)
    if magnitude == 0:
        return x.copy()
    return x + magnitude * generator(seed).standard_normal(x.shape)


def kalman_oracle(model: ModelSpec, obs_sigma: float, observations, prior_mean: float,
                  prior_var: float) -> list[tuple[float, float]]:
    """Exact filtering posteriors for the scalar linear-Gaussian model."""
    if model.kind != "linear-gaussian" or model.d_x != 1:
        raise ConfigError("kalman_oracle needs a 1-D linear-gaussian model")
    if obs_sigma <= 0 or prior_var <= 0:
        raise NumericError("variances must be positive")
    a = model.params["a"]
    q = model.process_noise_sigma ** 2
    r = obs_sigma ** 2
    m, v = float(prior_mean), float(prior_var)
    out = []
    for y in observations:
        for _ in range(model.steps_per_cycle):
            m, v = a * m, a * a * v + q
        y = float(np.asarray(y, dtype=np.float64).ravel()[0])
        gain = v / (v + r)
        m, v = m + gain * (y - m), (1.0 - gain) * v
        out.append((m, v))
    return out


def initial_ensemble(P: int, d_x: int, mean: float, std: float, seed: int) -> list[np.ndarray]:
    """Draw ``x_{p,0} ~ N(mean, std^2 I)``, one keyed generator per particle."""
    return [
        mean + std * generator(derive_seed(seed, Stream.INITIAL, p)).standard_normal(d_x)
        for p in range(P)
    ]


def generate_truth_and_observations(model: ModelSpec, op: ObservationOperatorSpec,
                                    obs_sigma: float, cycles: int, seed: int, x0=None):
    """Twin experiment: truth ``x_0..x_T`` and observations ``y_1..y_T``.

    ``observations[t-1]`` belongs to cycle ``t``.
    """
    if obs_sigma < 0 or not math.isfinite(obs_sigma):
        raise ConfigError("obs_sigma must be non-negative")
    if x0 is None:
        x0 = np.zeros(model.d_x)
    x = np.array(x0, dtype=np.float64)
    truth = [x]
    obs = []
    for t in range(1, cycles + 1):
        x = propagate(x, model, derive_seed(seed, Stream.TRUTH, t), realtime=False)
        truth.append(x)
        hx = observe(x, op)
        if obs_sigma:
            hx = hx + obs_sigma * generator(derive_seed(seed, Stream.OBS_NOISE, t)).standard_normal(hx.shape)
        obs.append(hx)
    return truth, obs
