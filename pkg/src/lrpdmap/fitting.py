"""Gradient-based estimation of LRPD parameters with a kappa curriculum.

Training runs in two phases. During warmup ``kappa = 0`` and only the mean
and the diagonal are learned; afterwards ``kappa`` ramps linearly to 1 so
the low-rank factor is switched on gradually. ``fit_dense_unstructured``
fits a free symmetric covariance with the same optimizer, to show why that
parameterization is avoided.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy import linalg

from lrpdmap import lrpd, rng
from lrpdmap.lrpd import LOG_D_MAX, LOG_D_MIN, LrpdParams, NumericalError
from lrpdmap.optim import AdamW, cosine_lr

log = logging.getLogger(__name__)

DEFAULT_RANK = 24
DEFAULT_LR = 6e-4


@dataclass(frozen=True)
class FitConfig:
    rank: int = DEFAULT_RANK
    lr: float = DEFAULT_LR
    epochs: int = 100
    warmup_epochs: int | None = None  # default: 20% of epochs
    ramp_epochs: int | None = None  # default: 20% of epochs
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4  # applied to L only
    seed: int = 0
    batch_size: int = 256
    kappa_mode: str = "fixed"  # "fixed": kappa stays at 1 after the ramp; "learned": optimized afterwards
    init: str = "data"  # "data": mean/variance of the targets; "zero": mu = 0, log_d = 0
    init_l_std: float = 1e-3

    def __post_init__(self):
        if self.warmup_epochs is None:
            object.__setattr__(self, "warmup_epochs", self.epochs // 5)
        if self.ramp_epochs is None:
            object.__setattr__(self, "ramp_epochs", self.epochs // 5)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 0 or self.ramp_epochs < 0:
            raise ValueError("warmup_epochs and ramp_epochs must be >= 0")
        if self.warmup_epochs + self.ramp_epochs > self.epochs:
            raise ValueError("warmup_epochs + ramp_epochs must not exceed epochs")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.rank < 0:
            raise ValueError("rank must be >= 0 (0 means diagonal-only)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kappa_mode not in ("fixed", "learned"):
            raise ValueError(f"unknown kappa_mode {self.kappa_mode!r}")
        if self.init not in ("data", "zero"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def kappa_at(epoch: int, cfg: FitConfig) -> float:
    """Curriculum value of kappa: 0 through warmup, then a linear ramp to 1."""
    if cfg.rank == 0:
        return 0.0
    if epoch < cfg.warmup_epochs:
        return 0.0
    if cfg.ramp_epochs == 0:
        return 1.0
    return min(1.0, (epoch - cfg.warmup_epochs) / cfg.ramp_epochs)


@dataclass(frozen=True)
class DenseGaussian:
    """Unstructured Gaussian from ``fit_dense_unstructured``; ``cov`` may be indefinite."""

    mu: np.ndarray
    cov: np.ndarray

    def is_psd(self) -> bool:
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            return False
        return True

    def nll(self, targets) -> np.ndarray:
        c = np.linalg.cholesky(self.cov)
        res = np.atleast_2d(targets) - self.mu
        z = linalg.solve_triangular(c, res.T, lower=True)
        return 2.0 * np.sum(np.log(np.diag(c))) + np.sum(z * z, axis=0)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "cov": self.cov.tolist()}


@dataclass
class FitReport:
    nll_trace: list[float] = field(default_factory=list)
    kappa_trace: list[float] = field(default_factory=list)
    heldout_trace: list[float] = field(default_factory=list)
    psd_violation_trace: list[int] = field(default_factory=list)
    final_params: Any = None
    diverged: bool = False
    wall_time: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.nll_trace)

    @property
    def psd_violations(self) -> int:
        return int(sum(self.psd_violation_trace))

    def to_dict(self, include_wall_time: bool = True) -> dict:
        out = {
            "nll_trace": self.nll_trace,
            "kappa_trace": self.kappa_trace,
            "heldout_trace": self.heldout_trace,
            "psd_violation_trace": self.psd_violation_trace,
            "psd_violations": self.psd_violations,
            "epochs_run": self.epochs_run,
            "diverged": self.diverged,
            "final_params": None if self.final_params is None else self.final_params.to_dict(),
        }
        if include_wall_time:
            out["wall_time"] = self.wall_time
        return out


def split_holdout(targets, seed: int, frac: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random train/held-out split (default 90/10)."""
    X = np.asarray(targets, dtype=np.float64)
    perm = rng.stream(seed, rng.SPLIT).permutation(X.shape[0])
    n_test = max(1, int(round(frac * X.shape[0])))
    return X[perm[n_test:]], X[perm[:n_test]]


def _check_targets(targets) -> np.ndarray:
    X = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a (B, 2N) array with B >= 2")
    if X.shape[1] % 2:
        raise ValueError("target dimension must be even")
    if not np.all(np.isfinite(X)):
        raise ValueError("targets must be finite")
    return X


def _init_moments(X: np.ndarray, cfg: FitConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.init == "zero":
        return np.zeros(X.shape[1]), np.zeros(X.shape[1])
    var = X.var(axis=0)
    with np.errstate(divide="ignore"):
        log_d = np.clip(np.log(var), LOG_D_MIN, LOG_D_MAX)
    return X.mean(axis=0), log_d


def _batches(gen: np.random.Generator, n: int, batch_size: int):
    perm = gen.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def fit_lrpd(targets, cfg: FitConfig, holdout=None) -> FitReport:
    """Fit one ``LrpdParams`` to the rows of ``targets`` by minibatch AdamW on mean NLL.

    ``kappa`` follows :func:`kappa_at` each epoch (and is optimized after the
    ramp when ``cfg.kappa_mode == "learned"``). Deterministic given
    ``cfg.seed``. A non-finite loss stops training; the report then carries
    the last finite parameters and ``diverged=True``.
    """
    t0 = time.perf_counter()
    X = _check_targets(targets)
    H = None if holdout is None else np.atleast_2d(np.asarray(holdout, dtype=np.float64))
    B, dim = X.shape
    if cfg.rank > dim:
        raise ValueError(f"rank {cfg.rank} exceeds dimension {dim}")

    mu, log_d = _init_moments(X, cfg)
    L = cfg.init_l_std * rng.stream(cfg.seed, rng.INIT).standard_normal((dim, cfg.rank))
    params = {"mu": mu, "log_d": log_d, "L": L, "kappa": np.array(0.0)}
    opt = AdamW(params, betas=cfg.betas, eps=cfg.eps, weight_decay={"L": cfg.weight_decay})
    shuffle = rng.stream(cfg.seed, rng.SHUFFLE)

    steps_per_epoch = math.ceil(B / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    report = FitReport()
    last_good = _to_params(params)
    step = 0
    for epoch in range(cfg.epochs):
        learn_kappa = cfg.kappa_mode == "learned" and cfg.rank > 0 and epoch >= cfg.warmup_epochs + cfg.ramp_epochs
        if not learn_kappa or epoch == cfg.warmup_epochs + cfg.ramp_epochs:
            params["kappa"] = np.array(kappa_at(epoch, cfg))
        losses = []
        violations = 0
        for idx in _batches(shuffle, B, cfg.batch_size):
            try:
                p = _to_params(params)
                value, g = lrpd.nll_value_and_grad(p, X[idx])
            except (NumericalError, ValueError, FloatingPointError):
                violations += 1
                value = float("nan")
            if not np.isfinite(value):
                losses.append(float("nan"))
                break
            losses.append(value)
            last_good = p
            grads = {"mu": g.d_mu, "log_d": g.d_log_d}
            if cfg.rank:
                grads["L"] = g.d_L
            if learn_kappa:
                grads["kappa"] = np.array(g.d_kappa)
            opt.step(params, grads, cosine_lr(cfg.lr, step, total_steps))
            np.clip(params["log_d"], LOG_D_MIN, LOG_D_MAX, out=params["log_d"])
            params["kappa"] = np.maximum(params["kappa"], 0.0)
            step += 1

        epoch_nll = float(np.mean(losses))
        report.nll_trace.append(epoch_nll)
        report.kappa_trace.append(float(params["kappa"]))
        report.psd_violation_trace.append(violations)
        if not np.isfinite(epoch_nll):
            report.diverged = True
            log.warning("fit diverged at epoch %d", epoch)
            break
        if H is not None:
            report.heldout_trace.append(lrpd.mean_nll(last_good, H))

    try:
        final = _to_params(params)
        if report.diverged:
            final = last_good
    except ValueError:
        final = last_good
    report.final_params = final
    report.wall_time = time.perf_counter() - t0
    return report


def _to_params(params: dict) -> LrpdParams:
    return LrpdParams(params["mu"].copy(), params["log_d"].copy(), params["L"].copy(), float(params["kappa"]))


def fit_dense_unstructured(targets, cfg: FitConfig, holdout=None) -> FitReport:
    """Fit mean and a free symmetric covariance ``(A + A^T) / 2`` with no PSD guarantee.

    A step whose covariance fails Cholesky is counted as a PSD violation; its
    loss is undefined and left out of the epoch mean, but the update still
    uses the gradient ``S - v v^T`` with ``S = Sigma^-1`` from a general
    solve. An epoch with no PSD step at all has a non-finite loss and ends
    the run as diverged.
    """
    t0 = time.perf_counter()
    X = _check_targets(targets)
    H = None if holdout is None else np.atleast_2d(np.asarray(holdout, dtype=np.float64))
    B, dim = X.shape
    mu, log_d = _init_moments(X, cfg)
    params = {"mu": mu, "A": np.diag(np.exp(log_d))}
    opt = AdamW(params, betas=cfg.betas, eps=cfg.eps)
    shuffle = rng.stream(cfg.seed, rng.SHUFFLE)
    total_steps = cfg.epochs * math.ceil(B / cfg.batch_size)

    report = FitReport()
    last_good = DenseGaussian(mu.copy(), params["A"].copy())
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        violations = 0
        for idx in _batches(shuffle, B, cfg.batch_size):
            cov = 0.5 * (params["A"] + params["A"].T)
            res = X[idx] - params["mu"]
            try:
                c = np.linalg.cholesky(cov)
                S = linalg.cho_solve((c, True), np.eye(dim))
                psd = True
            except np.linalg.LinAlgError:
                violations += 1
                psd = False
                try:
                    S = np.linalg.solve(cov, np.eye(dim))
                except np.linalg.LinAlgError:
                    continue
            V = res @ S
            if psd:
                value = 2.0 * np.sum(np.log(np.diag(c))) + float(np.mean(np.einsum("ij,ij->i", res, V)))
                losses.append(value)
                last_good = DenseGaussian(params["mu"].copy(), cov)
            grads = {"mu": -2.0 * V.mean(axis=0), "A": S - V.T @ V / len(idx)}
            if not all(np.all(np.isfinite(v)) for v in grads.values()):
                continue
            opt.step(params, grads, cosine_lr(cfg.lr, step, total_steps))
            step += 1

        epoch_nll = float(np.mean(losses)) if losses else float("nan")
        report.nll_trace.append(epoch_nll)
        report.kappa_trace.append(1.0)
        report.psd_violation_trace.append(violations)
        if not np.isfinite(epoch_nll):
            report.diverged = True
            log.warning("dense fit diverged at epoch %d", epoch)
            break
        if H is not None:
            report.heldout_trace.append(float(np.mean(last_good.nll(H))))

    report.final_params = last_good
    report.wall_time = time.perf_counter() - t0
    return report
