"""Bootstrap particle-filter arithmetic.

Weights are kept in linear space.  Because the ensemble is resampled after
every cycle the prior weights are always uniform, so the dynamic range stays
bounded and the Gaussian normalisation constant can be dropped: it cancels in
:func:`normalize`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateEnsembleError,
    InvalidEnsembleError,
    NumericError,
    ShapeError,
)
from .rng import generator


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    kind: str = "gaussian-iid"

    def __post_init__(self):
        if self.kind != "gaussian-iid":
            raise ValueError(f"unsupported noise kind {self.kind!r}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"noise sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class ResampleMultiset:
    """Outcome of SIR: unique parent indices and how often each was drawn."""

    parents: tuple[int, ...]
    counts: tuple[int, ...]

    @property
    def Q(self) -> int:
        return len(self.parents)

    @property
    def P(self) -> int:
        return sum(self.counts)

    def validate(self, P: int | None = None) -> None:
        from .errors import InvalidMultisetError

        if len(self.parents) != len(self.counts):
            raise InvalidMultisetError("parents and counts differ in length")
        if len(set(self.parents)) != len(self.parents):
            raise InvalidMultisetError("duplicate parent indices")
        if any(c < 1 for c in self.counts):
            raise InvalidMultisetError("every count must be >= 1")
        total = sum(self.counts)
        if P is not None:
            if total != P:
                raise InvalidMultisetError(f"counts sum to {total}, expected {P}")
            if any(not 0 <= p < P for p in self.parents):
                raise InvalidMultisetError("parent index out of range")

    def as_dict(self) -> dict:
        return {"parents": list(self.parents), "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "ResampleMultiset":
        return cls(tuple(int(p) for p in d["parents"]), tuple(int(c) for c in d["counts"]))

    @classmethod
    def identity(cls, P: int) -> "ResampleMultiset":
        return cls(tuple(range(P)), (1,) * P)


def init_weights(P: int) -> np.ndarray:
    if P < 1:
        raise InvalidEnsembleError(f"ensemble size must be >= 1, got {P}")
    return np.full(P, 1.0 / P)


def likelihood(projected, observation, noise: NoiseSpec) -> float:
    """Unnormalised Gaussian kernel ``exp(-|y - H(x)|^2 / (2 sigma^2))``."""
    hx = np.asarray(projected, dtype=np.float64)
    y = np.asarray(observation, dtype=np.float64)
    if hx.shape != y.shape:
        raise ShapeError(f"projected shape {hx.shape} != observation shape {y.shape}")
    r = y - hx
    if not np.all(np.isfinite(r)):
        raise NumericError("non-finite residual")
    sq = float(np.dot(r.ravel(), r.ravel()))
    return math.exp(-sq / (2.0 * noise.sigma * noise.sigma))


def accumulate_weight(prev: float, like: float) -> float:
    if prev < 0 or like < 0 or not math.isfinite(prev) or not math.isfinite(like):
        raise NumericError(f"weights must be finite and non-negative ({prev}, {like})")
    w = prev * like
    if not math.isfinite(w):
        raise NumericError("weight overflow")
    return w


def normalize(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidEnsembleError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise NumericError("weights must be finite and non-negative")
    total = math.fsum(w.tolist())
    if total == 0.0:
        raise DegenerateEnsembleError("all particle weights are zero")
    return w / total


def resample(weights: Sequence[float], seed: int) -> ResampleMultiset:
    """Multinomial SIR draw of ``P = len(weights)`` particles."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidEnsembleError("weights must be a non-empty vector")
    if np.any(w < 0) or abs(math.fsum(w.tolist()) - 1.0) > 1e-9:
        raise InvalidEnsembleError("resample expects normalised weights")
    P = w.size
    counts = generator(seed).multinomial(P, w)
    parents = np.flatnonzero(counts)
    return ResampleMultiset(tuple(int(p) for p in parents), tuple(int(c) for c in counts[parents]))


def effective_sample_size(weights: Sequence[float]) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return 1.0 / float(np.dot(w, w))
