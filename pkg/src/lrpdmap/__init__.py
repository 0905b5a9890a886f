"""Structured low-rank-plus-diagonal Gaussians over vectorized map polylines."""

from lrpdmap.geometry import ClassProbs, GeometryError, Polyline, Scenario, flatten, resample, unflatten
from lrpdmap.lrpd import LrpdParams, dense_cov, logdet, mahalanobis, nll, nll_grad, sample

__version__ = "0.1.0"

__all__ = [
    "ClassProbs",
    "GeometryError",
    "LrpdParams",
    "Polyline",
    "Scenario",
    "dense_cov",
    "flatten",
    "logdet",
    "mahalanobis",
    "nll",
    "nll_grad",
    "resample",
    "sample",
    "unflatten",
]
