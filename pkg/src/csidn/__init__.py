"""Confidence-scored instance-dependent label noise: data, estimators, trainers, harness."""

from csidn.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
