"""Polyline and scenario types for BEV map elements.

A polyline of N points is flattened as ``(x1, y1, x2, y2, ..., xN, yN)``.
Every covariance index elsewhere in the package assumes this interleaved
order: coordinate ``2n`` is the x of point ``n`` and ``2n + 1`` its y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

DEFAULT_N_POINTS = 20

CLASS_NAMES = ("divider", "boundary", "crossing", "centerline")


class GeometryError(ValueError):
    """Invalid or degenerate geometry."""


@dataclass(frozen=True, eq=False)
class Polyline:
    """Ordered sequence of N >= 2 finite BEV points, in meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError(f"expected (N, 2) points, got shape {pts.shape}")
        if pts.shape[0] < 2:
            raise GeometryError("a polyline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("polyline coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def segment_lengths(self) -> np.ndarray:
        return np.hypot(*np.diff(self.points, axis=0).T)

    def length(self) -> float:
        return float(self.segment_lengths().sum())

    def to_list(self) -> list[list[float]]:
        return self.points.tolist()

    def __eq__(self, other):
        if not isinstance(other, Polyline):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __len__(self):
        return self.n_points


def flatten(p: Polyline) -> np.ndarray:
    """Interleave the points of ``p`` into a 2N vector."""
    return p.points.reshape(-1).copy()


def unflatten(v) -> Polyline:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size % 2:
        raise GeometryError(f"expected an even-length vector, got shape {v.shape}")
    return Polyline(v.reshape(-1, 2))


def resample(p: Polyline, n_target: int) -> Polyline:
    """Resample ``p`` to ``n_target`` points equally spaced in arc length.

    Interpolation is piecewise linear between the input vertices, so both
    endpoints are kept exactly and the output lies on ``p``.
    """
    if n_target < 2:
        raise GeometryError("n_target must be >= 2")
    seg = p.segment_lengths()
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        raise GeometryError("cannot resample a zero-length polyline")
    # drop repeated vertices so that arc length is strictly increasing for interp
    keep = np.concatenate([[True], seg > 0.0])
    cum, pts = cum[keep], p.points[keep]
    s = np.linspace(0.0, total, n_target)
    out = np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])
    out[0] = p.points[0]
    out[-1] = p.points[-1]
    return Polyline(out)


@dataclass(frozen=True, eq=False)
class ClassProbs:
    """Class probability vector on the standard simplex."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if probs.size == 0:
            raise ValueError("class probability vector is empty")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise ValueError("class probabilities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"class probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_classes(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def confidence(self, class_idx: int | None = None) -> float:
        """Scalar confidence: probability of ``class_idx``, else of the top class."""
        if class_idx is None or class_idx >= self.n_classes:
            return float(self.probs.max())
        return float(self.probs[class_idx])


@dataclass(frozen=True)
class Agent:
    history: Polyline
    future: Polyline


@dataclass(frozen=True)
class Scenario:
    """Ground-truth map elements and agent tracks for one scene.

    ``samples`` optionally holds noisy observations of each element (one
    ``(M, 2N)`` array per element), which is what the fitter consumes.
    """

    gt_elements: tuple[tuple[int, Polyline], ...]
    agents: tuple[Agent, ...] = ()
    metadata: dict[str, Any] = field(default_factory=dict)
    n_classes: int = len(CLASS_NAMES)
    samples: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "gt_elements", tuple((int(c), p) for c, p in self.gt_elements))
        object.__setattr__(self, "agents", tuple(self.agents))
        for c, _ in self.gt_elements:
            if not 0 <= c < self.n_classes:
                raise GeometryError(f"class index {c} outside [0, {self.n_classes})")
        horizons = {a.future.n_points for a in self.agents}
        if len(horizons) > 1:
            raise GeometryError(f"agent futures have mixed horizons {sorted(horizons)}")
        if self.samples is not None:
            if len(self.samples) != len(self.gt_elements):
                raise GeometryError("need one sample array per ground-truth element")
            arrs = []
            for (_, p), s in zip(self.gt_elements, self.samples):
                s = np.asarray(s, dtype=np.float64)
                if s.ndim != 2 or s.shape[1] != 2 * p.n_points:
                    raise GeometryError(f"samples of shape {s.shape} do not match a {p.n_points}-point element")
                arrs.append(s)
            object.__setattr__(self, "samples", tuple(arrs))

    @property
    def horizon(self) -> int | None:
        return self.agents[0].future.n_points if self.agents else None

    def to_dict(self) -> dict:
        out = {
            "gt_elements": [{"class": c, "points": p.to_list()} for c, p in self.gt_elements],
            "agents": [{"history": a.history.to_list(), "future": a.future.to_list()} for a in self.agents],
            "metadata": dict(self.metadata),
        }
        out["metadata"].setdefault("n_classes", self.n_classes)
        if self.samples is not None:
            out["samples"] = [s.tolist() for s in self.samples]
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> Scenario:
        meta = dict(doc.get("metadata", {}))
        samples = doc.get("samples")
        return cls(
            gt_elements=tuple((e["class"], Polyline(e["points"])) for e in doc["gt_elements"]),
            agents=tuple(Agent(Polyline(a["history"]), Polyline(a["future"])) for a in doc.get("agents", [])),
            metadata=meta,
            n_classes=int(meta.get("n_classes", len(CLASS_NAMES))),
            samples=None if samples is None else tuple(np.asarray(s, dtype=np.float64) for s in samples),
        )
