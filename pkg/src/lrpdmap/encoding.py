"""Per-point uncertainty features and confidence-conditioned FiLM modulation.

Point ``n`` of an element becomes the ``4 + 2R`` vector::

    [mu_x, mu_y, d_x, d_y, l_x (R), l_y (R)]

where ``d_x, d_y`` are the diagonal entries of ``D`` only (no low-rank
contribution) and ``l_x, l_y`` are rows ``2n, 2n+1`` of the kappa-folded
factor ``sqrt(kappa) * L``, so a consumer sees a single canonical factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lrpdmap import rng
from lrpdmap.geometry import CLASS_NAMES
from lrpdmap.lrpd import ElementDistribution, LrpdParams, ProbMap

DEFAULT_EMBED_DIM = 128
CENTERLINE = CLASS_NAMES.index("centerline")


def feature_dim(rank: int) -> int:
    return 4 + 2 * rank


def encode_element(p: LrpdParams) -> np.ndarray:
    """Point features of one element, shape ``(N, 4 + 2R)``."""
    Lf = np.sqrt(p.kappa) * p.L
    return np.hstack([
        p.mu.reshape(-1, 2),
        p.d.reshape(-1, 2),
        Lf[0::2],
        Lf[1::2],
    ])


def decode_features(features) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reassemble ``(mu, d, L_folded)`` from point features, exactly."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] < 4 or (f.shape[1] - 4) % 2:
        raise ValueError(f"feature rows must have length 4 + 2R, got shape {f.shape}")
    r = (f.shape[1] - 4) // 2
    L = np.empty((2 * f.shape[0], r))
    L[0::2] = f[:, 4 : 4 + r]
    L[1::2] = f[:, 4 + r :]
    return f[:, 0:2].reshape(-1), f[:, 2:4].reshape(-1), L


def decode_element(features) -> LrpdParams:
    """Inverse of :func:`encode_element` up to kappa folding (returns ``kappa = 1``)."""
    mu, d, L = decode_features(features)
    return LrpdParams(mu, np.log(d), L, 1.0)


@dataclass(frozen=True, eq=False)
class FilmWeights:
    """Point embedding ``embed_w @ e + embed_b`` and the two scalar-conditioned maps ``gamma``, ``beta``."""

    embed_w: np.ndarray  # (D_e, 4 + 2R)
    embed_b: np.ndarray  # (D_e,)
    gamma_w: np.ndarray  # (D_e,)
    gamma_b: np.ndarray
    beta_w: np.ndarray
    beta_b: np.ndarray

    def __post_init__(self):
        arrs = {k: np.asarray(getattr(self, k), dtype=np.float64) for k in self.__dataclass_fields__}
        de = arrs["embed_w"].shape[0] if arrs["embed_w"].ndim == 2 else -1
        if de < 1:
            raise ValueError("embed_w must be a (D_e, F) matrix")
        for k in ("embed_b", "gamma_w", "gamma_b", "beta_w", "beta_b"):
            arrs[k] = arrs[k].reshape(-1)
            if arrs[k].shape != (de,):
                raise ValueError(f"{k} has shape {arrs[k].shape}, expected ({de},)")
        for k, a in arrs.items():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{k} has non-finite entries")
            object.__setattr__(self, k, a)

    @property
    def embed_dim(self) -> int:
        return self.embed_w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.embed_w.shape[1]

    @classmethod
    def random(cls, seed: int, rank: int, embed_dim: int = DEFAULT_EMBED_DIM) -> FilmWeights:
        """Uniform fan-in initialization, as for a freshly built linear layer."""
        gen = rng.stream(seed, rng.INIT)
        fan = feature_dim(rank)
        bound = 1.0 / np.sqrt(fan)
        return cls(
            embed_w=gen.uniform(-bound, bound, (embed_dim, fan)),
            embed_b=gen.uniform(-bound, bound, embed_dim),
            gamma_w=gen.uniform(-1.0, 1.0, embed_dim),
            gamma_b=gen.uniform(-1.0, 1.0, embed_dim),
            beta_w=gen.uniform(-1.0, 1.0, embed_dim),
            beta_b=gen.uniform(-1.0, 1.0, embed_dim),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, doc: dict) -> FilmWeights:
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__})


def embed(e, w: FilmWeights) -> np.ndarray:
    return np.asarray(e, dtype=np.float64) @ w.embed_w.T + w.embed_b


def film_modulate(e, confidence: float, w: FilmWeights) -> np.ndarray:
    """``ReLU(gamma(c)) * embed(e) + beta(c)`` for one feature row or an ``(N, F)`` batch."""
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence {confidence!r} outside [0, 1]")
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != w.in_dim:
        raise ValueError(f"feature length {e.shape[-1]} does not match weights ({w.in_dim})")
    gamma = np.maximum(w.gamma_w * confidence + w.gamma_b, 0.0)
    beta = w.beta_w * confidence + w.beta_b
    return gamma * embed(e, w) + beta


def element_confidence(el: ElementDistribution, confidence_class: int | None = None) -> float:
    """Probability of ``confidence_class``; by default of centerline, or of the element's own
    class when the probability vector has no centerline entry."""
    if confidence_class is None:
        confidence_class = CENTERLINE if el.probs.n_classes > CENTERLINE else el.class_idx
    return el.probs.confidence(confidence_class)


def encode_map(pmap: ProbMap, w: FilmWeights, confidence_class: int | None = None) -> list[np.ndarray]:
    """Modulated embeddings ``(N, D_e)`` for every element of a probabilistic map."""
    return [
        film_modulate(encode_element(el.params), element_confidence(el, confidence_class), w) for el in pmap.elements
    ]
