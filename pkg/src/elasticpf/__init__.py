"""Elastic, fault-tolerant particle-filter runtime with a distributed particle cache."""

from .filtering import ResampleMultiset, normalize, resample
from .store import ParticleId

__version__ = "0.1.0"

__all__ = ["ParticleId", "ResampleMultiset", "normalize", "resample", "__version__"]
