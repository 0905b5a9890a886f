"""Low-rank-plus-diagonal Gaussian over a flattened polyline.

The covariance is ``Sigma = D + kappa * L @ L.T`` with ``D = diag(exp(log_d))``.
All production kernels go through the R x R capacitance matrix
``M = I + kappa * L.T @ D^-1 @ L``:

* log-determinant by the matrix determinant lemma,
  ``log|Sigma| = sum(log d) + log|M|``;
* inverse by the Woodbury identity,
  ``Sigma^-1 = D^-1 - kappa * D^-1 L M^-1 L.T D^-1``.

Cost is O(N R^2 + R^3) per element and the dense 2N x 2N matrix is never
formed, except by :func:`dense_cov`, which exists for oracles and small
exports.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg

from lrpdmap import rng as _rng
from lrpdmap.geometry import ClassProbs, Polyline, unflatten

LOG_D_MIN = -10.0
LOG_D_MAX = 10.0
LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(ArithmeticError):
    """A factorization that the parameter invariants guarantee has failed."""


@dataclass(frozen=True, eq=False)
class LrpdParams:
    """One structured Gaussian: mean ``mu``, log-variances ``log_d``, factor ``L``, scale ``kappa``."""

    mu: np.ndarray
    log_d: np.ndarray
    L: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        log_d = np.array(self.log_d, dtype=np.float64).reshape(-1)
        L = np.array(self.L, dtype=np.float64)
        if L.ndim == 1 and L.size == 0:
            L = L.reshape(mu.size, 0)
        dim = mu.size
        if dim == 0 or dim % 2:
            raise ValueError(f"mean must have even positive length, got {dim}")
        if log_d.shape != (dim,):
            raise ValueError(f"log_d has shape {log_d.shape}, expected ({dim},)")
        if L.ndim != 2 or L.shape[0] != dim:
            raise ValueError(f"L has shape {L.shape}, expected ({dim}, R)")
        if L.shape[1] > dim:
            raise ValueError(f"rank {L.shape[1]} exceeds dimension {dim}")
        kappa = float(self.kappa)
        if not kappa >= 0.0 or not np.isfinite(kappa):
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa!r}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_d)) and np.all(np.isfinite(L))):
            raise ValueError("parameters must be finite")
        for a in (mu, log_d, L):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_d", log_d)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "kappa", kappa)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def n_points(self) -> int:
        return self.mu.size // 2

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @property
    def d(self) -> np.ndarray:
        return np.exp(np.clip(self.log_d, LOG_D_MIN, LOG_D_MAX))

    def mean_polyline(self) -> Polyline:
        return unflatten(self.mu)

    def folded(self) -> LrpdParams:
        """Same distribution with ``kappa`` absorbed into ``L`` (``kappa = 1``)."""
        return replace(self, L=np.sqrt(self.kappa) * self.L, kappa=1.0)

    def marginal_var(self) -> np.ndarray:
        """Diagonal of the dense covariance, in O(N R)."""
        return self.d + self.kappa * np.einsum("ij,ij->i", self.L, self.L)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "log_d": self.log_d.tolist(),
            "L": self.L.tolist(),
            "kappa": self.kappa,
            "n_points": self.n_points,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> LrpdParams:
        n, r = int(doc["n_points"]), int(doc["rank"])
        p = cls(
            mu=doc["mu"],
            log_d=doc["log_d"],
            L=np.asarray(doc["L"], dtype=np.float64).reshape(2 * n, r),
            kappa=doc["kappa"],
        )
        if p.n_points != n:
            raise ValueError(f"n_points={n} does not match mean of length {p.dim}")
        return p

    def to_bytes(self) -> bytes:
        """Binary export.

        Layout (little-endian): magic ``b"LRPD"``, ``uint32`` format version (1),
        ``uint32`` N, ``uint32`` R, ``float64`` kappa, then ``mu`` (2N),
        ``log_d`` (2N) and ``L`` (2N x R, row-major) as ``float64``.
        """
        head = b"LRPD" + struct.pack("<IIId", 1, self.n_points, self.rank, self.kappa)
        body = np.concatenate([self.mu, self.log_d, self.L.reshape(-1)]).astype("<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> LrpdParams:
        if buf[:4] != b"LRPD":
            raise ValueError("not an LRPD binary blob")
        version, n, r, kappa = struct.unpack_from("<IIId", buf, 4)
        if version != 1:
            raise ValueError(f"unsupported LRPD binary version {version}")
        flat = np.frombuffer(buf, dtype="<f8", offset=4 + struct.calcsize("<IIId"))
        dim = 2 * n
        if flat.size != dim * (2 + r):
            raise ValueError("truncated LRPD binary blob")
        return cls(flat[:dim], flat[dim : 2 * dim], flat[2 * dim :].reshape(dim, r), kappa)


def covariance_parameter_count(dim: int, rank: int) -> int:
    """Free covariance parameters of an LRPD element: ``dim`` diagonal + ``dim * rank`` factor entries."""
    return dim + dim * rank


def full_covariance_parameter_count(dim: int, symmetric: bool = False) -> int:
    """Entries of a dense ``dim x dim`` covariance head (unique entries if ``symmetric``)."""
    return dim * (dim + 1) // 2 if symmetric else dim * dim


class CapacitanceFactor(NamedTuple):
    chol: np.ndarray  # lower Cholesky factor of M = I + kappa L^T D^-1 L
    DinvL: np.ndarray


def capacitance(p: LrpdParams) -> CapacitanceFactor:
    W = p.L / p.d[:, None]
    M = np.eye(p.rank) + p.kappa * (p.L.T @ W)
    try:
        C = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("capacitance matrix is not positive definite") from exc
    return CapacitanceFactor(C, W)


def dense_cov(p: LrpdParams) -> np.ndarray:
    """Materialize ``D + kappa L L^T``. Oracle and small-N export only."""
    return np.diag(p.d) + p.kappa * (p.L @ p.L.T)


def logdet(p: LrpdParams, cap: CapacitanceFactor | None = None) -> float:
    cap = cap or capacitance(p)
    return float(np.sum(np.log(p.d)) + 2.0 * np.sum(np.log(np.diag(cap.chol))))


def _as_batch(p: LrpdParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.dim:
        raise ValueError(f"expected vectors of length {p.dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("vectors must be finite")
    return x


def _precision_times(p: LrpdParams, cap: CapacitanceFactor, R: np.ndarray) -> np.ndarray:
    """Rows of ``R @ Sigma^-1`` via Woodbury."""
    q = R / p.d
    if p.rank == 0 or p.kappa == 0.0:
        return q
    t = linalg.cho_solve((cap.chol, True), (q @ p.L).T)
    return q - p.kappa * (cap.DinvL @ t).T


def mahalanobis(p: LrpdParams, r, cap: CapacitanceFactor | None = None):
    """``r^T Sigma^-1 r`` for one residual, or per row for a 2-D batch."""
    batch = _as_batch(p, r)
    cap = cap or capacitance(p)
    V = _precision_times(p, cap, batch)
    out = np.maximum(np.einsum("ij,ij->i", batch, V), 0.0)
    return float(out[0]) if np.ndim(r) == 1 else out


def nll(p: LrpdParams, target, normalized: bool = False):
    """``log|Sigma| + r^T Sigma^-1 r`` with ``r = target - mu``.

    The ``2N log(2 pi)`` constant is left out unless ``normalized`` is set, in
    which case the result is exactly ``-2 log N(target | mu, Sigma)``.
    Accepts a single target or a 2-D batch (one value per row).
    """
    batch = _as_batch(p, target)
    cap = capacitance(p)
    val = logdet(p, cap) + mahalanobis(p, batch - p.mu, cap)
    if normalized:
        val = val + p.dim * LOG_2PI
    return float(val[0]) if np.ndim(target) == 1 else val


def mean_nll(p: LrpdParams, targets, normalized: bool = False) -> float:
    return float(np.mean(nll(p, np.atleast_2d(targets), normalized=normalized)))


class NllGrad(NamedTuple):
    d_mu: np.ndarray
    d_log_d: np.ndarray
    d_L: np.ndarray
    d_kappa: float


def nll_value_and_grad(p: LrpdParams, targets) -> tuple[float, NllGrad]:
    """Mean NLL over the rows of ``targets`` and its analytic gradient.

    With ``S = Sigma^-1`` and ``v = S r`` per row, ``dNLL/dSigma = S - v v^T``
    (averaged). The diagonal of ``S`` and the product ``S L = D^-1 L M^-1`` come
    from the capacitance factor, so nothing of size 2N x 2N is built.
    Entries of ``log_d`` outside the clamp range get zero gradient.
    """
    batch = _as_batch(p, targets)
    B = batch.shape[0]
    cap = capacitance(p)
    d, L, kappa = p.d, p.L, p.kappa
    res = batch - p.mu
    V = _precision_times(p, cap, res)
    value = logdet(p, cap) + float(np.mean(np.einsum("ij,ij->i", res, V)))

    if p.rank:
        K = linalg.solve_triangular(cap.chol, cap.DinvL.T, lower=True)
        diag_S = 1.0 / d - kappa * np.einsum("ij,ij->j", K, K)
        SL = linalg.cho_solve((cap.chol, True), cap.DinvL.T).T
        VL = V @ L
        d_L = 2.0 * kappa * (SL - V.T @ VL / B)
        d_kappa = float(np.sum(L * SL) - np.einsum("ij,ij->", VL, VL) / B)
    else:
        diag_S = 1.0 / d
        d_L = np.zeros_like(L)
        d_kappa = 0.0
    g_d = diag_S - np.mean(V * V, axis=0)
    active = (p.log_d >= LOG_D_MIN) & (p.log_d <= LOG_D_MAX)
    d_log_d = np.where(active, d * g_d, 0.0)
    d_mu = -2.0 * np.mean(V, axis=0)
    return value, NllGrad(d_mu, d_log_d, d_L, d_kappa)


def nll_grad(p: LrpdParams, target) -> NllGrad:
    return nll_value_and_grad(p, target)[1]


def sample(p: LrpdParams, rng_seed: int, count: int) -> np.ndarray:
    """Draw ``count`` vectors ``mu + sqrt(kappa) L z + sqrt(d) * eps``, shape (count, 2N)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    gen = _rng.stream(rng_seed, _rng.SAMPLE)
    z = gen.standard_normal((count, p.rank))
    eps = gen.standard_normal((count, p.dim))
    return p.mu + np.sqrt(p.kappa) * (z @ p.L.T) + np.sqrt(p.d) * eps


def rotate_factor(p: LrpdParams, Q, atol: float = 1e-10) -> LrpdParams:
    """Return the same distribution with factor ``L @ Q`` for orthogonal ``Q``."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != (p.rank, p.rank):
        raise ValueError(f"Q must be {p.rank} x {p.rank}, got {Q.shape}")
    if np.max(np.abs(Q @ Q.T - np.eye(p.rank)), initial=0.0) > atol:
        raise ValueError("Q is not orthogonal")
    return replace(p, L=p.L @ Q)


def random_params(
    gen: np.random.Generator,
    n_points: int,
    rank: int,
    kappa: float | None = None,
    scale: float = 1.0,
) -> LrpdParams:
    """Random well-scaled parameters for tests, oracles and benchmarks."""
    dim = 2 * n_points
    return LrpdParams(
        mu=scale * gen.normal(size=dim),
        log_d=gen.uniform(-3.0, 1.0, size=dim) + 2.0 * np.log(scale),
        L=scale * gen.normal(size=(dim, rank)) / np.sqrt(max(rank, 1)),
        kappa=gen.uniform(0.2, 2.0) if kappa is None else kappa,
    )


@dataclass(frozen=True)
class ElementDistribution:
    """One weighted map element: class probabilities plus its Gaussian."""

    probs: ClassProbs
    params: LrpdParams
    label: int | None = None

    @property
    def class_idx(self) -> int:
        return self.probs.argmax() if self.label is None else self.label

    @property
    def score(self) -> float:
        return self.probs.confidence(self.class_idx)


@dataclass(frozen=True)
class ProbMap:
    """Full map prediction: a set of weighted element distributions."""

    elements: tuple[ElementDistribution, ...]

    def to_dict(self) -> dict:
        return {
            "elements": [
                {
                    "class": e.class_idx,
                    "score": e.score,
                    "probs": e.probs.probs.tolist(),
                    "params": e.params.to_dict(),
                }
                for e in self.elements
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ProbMap:
        return cls(
            tuple(
                ElementDistribution(ClassProbs(e["probs"]), LrpdParams.from_dict(e["params"]), e.get("class"))
                for e in doc["elements"]
            )
        )
