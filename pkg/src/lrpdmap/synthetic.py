"""Synthetic map scenes and correlated polyline noise with known covariance.

Every noise model is a low-rank-plus-diagonal covariance ``F F^T + diag(s)``
built from the ground-truth polyline, so samples come with their exact
generating covariance for use as an evaluation oracle.

Noise kinds (all magnitudes in meters):

``independent``
    iid per coordinate, variance ``marginal_std**2``.
``translation``
    the whole element shifts rigidly; two factors (all-ones on x, all-ones
    on y), each scaled by ``marginal_std``.
``curvature``
    smooth bending: cosine modes ``cos(pi k s)`` over normalized arc length
    ``s`` for ``k = 1..K`` on each axis, ``K = max(1, N // correlation_length - 1)``,
    scaled so that the average marginal variance is ``marginal_std**2``.
``range-growth``
    independent with standard deviation ``marginal_std + range_growth_rate * arc_length``.
``composite``
    weighted sum of sub-model covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lrpdmap import rng
from lrpdmap.geometry import CLASS_NAMES, Agent, Polyline, Scenario, flatten, resample

KINDS = ("independent", "translation", "curvature", "range-growth", "composite")


@dataclass(frozen=True)
class NoiseCovariance:
    factor: np.ndarray  # (2N, K)
    diag: np.ndarray  # (2N,)

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + self.factor @ self.factor.T

    def draw(self, gen: np.random.Generator, count: int) -> np.ndarray:
        z = gen.standard_normal((count, self.factor.shape[1]))
        eps = gen.standard_normal((count, self.diag.size))
        return z @ self.factor.T + np.sqrt(self.diag) * eps


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    marginal_std: float = 0.3
    correlation_length: float = 5.0
    range_growth_rate: float = 0.0
    components: tuple[tuple[float, NoiseModel], ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.marginal_std < 0 or self.range_growth_rate < 0:
            raise ValueError("marginal_std and range_growth_rate must be >= 0")
        if self.correlation_length < 1:
            raise ValueError("correlation_length must be >= 1")
        if self.kind == "composite":
            if not self.components:
                raise ValueError("composite noise needs at least one component")
            if any(w <= 0 for w, _ in self.components):
                raise ValueError("composite weights must be positive")
        object.__setattr__(self, "components", tuple((float(w), m) for w, m in self.components))

    def to_dict(self) -> dict:
        if self.kind == "composite":
            return {"kind": "composite", "components": [{"weight": w, "model": m.to_dict()} for w, m in self.components]}
        return {
            "kind": self.kind,
            "marginal_std": self.marginal_std,
            "correlation_length": self.correlation_length,
            "range_growth_rate": self.range_growth_rate,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> NoiseModel:
        if doc["kind"] == "composite":
            comps = tuple((c["weight"], cls.from_dict(c["model"])) for c in doc["components"])
            return cls("composite", components=comps)
        return cls(
            doc["kind"],
            marginal_std=doc.get("marginal_std", 0.3),
            correlation_length=doc.get("correlation_length", 5.0),
            range_growth_rate=doc.get("range_growth_rate", 0.0),
        )

    def covariance(self, gt: Polyline) -> NoiseCovariance:
        n = gt.n_points
        dim = 2 * n
        var = self.marginal_std**2
        empty = np.zeros((dim, 0))
        if self.kind == "independent":
            return NoiseCovariance(empty, np.full(dim, var))
        if self.kind == "translation":
            F = np.zeros((dim, 2))
            F[0::2, 0] = self.marginal_std
            F[1::2, 1] = self.marginal_std
            return NoiseCovariance(F, np.zeros(dim))
        arc = np.concatenate([[0.0], np.cumsum(gt.segment_lengths())])
        if self.kind == "range-growth":
            std = self.marginal_std + self.range_growth_rate * arc
            return NoiseCovariance(empty, np.repeat(std**2, 2))
        if self.kind == "curvature":
            k_modes = curvature_modes(n, self.correlation_length)
            s = arc / arc[-1] if arc[-1] > 0 else np.linspace(0.0, 1.0, n)
            basis = np.cos(np.pi * np.outer(s, np.arange(1, k_modes + 1)))  # (N, K)
            basis *= np.sqrt(var / np.mean(np.sum(basis**2, axis=1)))
            F = np.zeros((dim, 2 * k_modes))
            F[0::2, :k_modes] = basis
            F[1::2, k_modes:] = basis
            return NoiseCovariance(F, np.zeros(dim))
        parts = [(w, m.covariance(gt)) for w, m in self.components]
        return NoiseCovariance(
            np.hstack([np.sqrt(w) * c.factor for w, c in parts]),
            np.sum([w * c.diag for w, c in parts], axis=0),
        )


def curvature_modes(n_points: int, correlation_length: float) -> int:
    return max(1, int(n_points // correlation_length) - 1)


def corrupt(gt: Polyline, model: NoiseModel, seed: int, count: int) -> tuple[np.ndarray, NoiseCovariance]:
    """Draw ``count`` residual vectors (shape ``(count, 2N)``) and return them with their exact covariance."""
    cov = model.covariance(gt)
    return cov.draw(rng.stream(seed, rng.NOISE), count), cov


def _straight(gen, length, n):
    t = np.linspace(0.0, length, n)
    return np.column_stack([t, np.zeros_like(t)])


def _arc(gen, length, n):
    radius = gen.uniform(12.0, 40.0) * gen.choice([-1.0, 1.0])
    theta = np.linspace(0.0, length / abs(radius), n)  # equal arc length, exactly
    return np.column_stack([abs(radius) * np.sin(theta), radius * (1.0 - np.cos(theta))])


def _s_curve(gen, length, n):
    amp = gen.uniform(0.03, 0.1) * length
    t = np.linspace(0.0, length, 2000)
    dense = np.column_stack([t, amp * np.sin(2.0 * np.pi * t / length)])
    return resample(Polyline(dense), n).points


SHAPES = {"straight": _straight, "arc": _arc, "s-curve": _s_curve}


def gen_element(gen: np.random.Generator, n_points: int, extent: float, shape: str | None = None) -> Polyline:
    """One random element fully inside ``[-extent, extent]^2`` with equal arc-length spacing."""
    shape = shape or str(gen.choice(list(SHAPES)))
    for _ in range(1000):
        length = gen.uniform(0.2, 0.6) * extent
        local = SHAPES[shape](gen, length, n_points)
        heading = gen.uniform(-np.pi, np.pi)
        rot = np.array([[np.cos(heading), -np.sin(heading)], [np.sin(heading), np.cos(heading)]])
        start = gen.uniform(-0.8 * extent, 0.8 * extent, size=2)
        pts = local @ rot.T + start
        if np.all(np.abs(pts) <= extent):
            return Polyline(pts)
    raise RuntimeError("could not place an element inside the extent")


def gen_map(
    seed: int,
    n_elements: int,
    n_points: int = 20,
    extent: float = 30.0,
    n_agents: int = 2,
    history: int = 10,
    horizon: int = 30,
) -> Scenario:
    """Random scene of straight, arc and S-curve elements with classes drawn from ``CLASS_NAMES``.

    Agents drive along randomly chosen elements: the first 40% of an
    element's arc length is the history, the rest the future.
    """
    if n_elements < 1 or n_points < 2:
        raise ValueError("need n_elements >= 1 and n_points >= 2")
    gen = rng.stream(seed, rng.MAP)
    elements = []
    for _ in range(n_elements):
        cls = int(gen.integers(len(CLASS_NAMES)))
        elements.append((cls, gen_element(gen, n_points, extent)))
    agents = []
    for _ in range(n_agents):
        _, lane = elements[int(gen.integers(n_elements))]
        dense = resample(lane, 101)
        agents.append(
            Agent(
                history=resample(Polyline(dense.points[:41]), history),
                future=resample(Polyline(dense.points[40:]), horizon),
            )
        )
    meta = {"seed": seed, "extent": extent, "n_points": n_points, "class_names": list(CLASS_NAMES)}
    return Scenario(tuple(elements), tuple(agents), meta)


def with_samples(scn: Scenario, model: NoiseModel, seed: int, count: int) -> Scenario:
    """Attach ``count`` noisy observations of every element (independent stream per element)."""
    samples = []
    for k, (_, p) in enumerate(scn.gt_elements):
        cov = model.covariance(p)
        samples.append(flatten(p) + cov.draw(rng.stream(seed, rng.NOISE, k), count))
    meta = dict(scn.metadata, noise=model.to_dict(), noise_seed=seed, n_samples=count)
    return Scenario(scn.gt_elements, scn.agents, meta, scn.n_classes, tuple(samples))
