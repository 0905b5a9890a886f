"""Dense-matrix reference computations and the randomized oracle sweep.

Nothing here goes through the capacitance matrix: every quantity is computed
from the materialized 2N x 2N covariance with generic dense routines, so it
checks the Woodbury/determinant-lemma kernels by an independent route.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from lrpdmap import lrpd, rng
from lrpdmap.lrpd import LrpdParams

ORACLE_N = (2, 10, 25, 50)
ORACLE_R = (1, 4, 8, 24)


def dense_logdet(p: LrpdParams) -> float:
    c = np.linalg.cholesky(lrpd.dense_cov(p))
    return float(2.0 * np.sum(np.log(np.diag(c))))


def dense_mahalanobis(p: LrpdParams, r) -> float:
    r = np.asarray(r, dtype=np.float64)
    return float(r @ np.linalg.solve(lrpd.dense_cov(p), r))


def dense_nll(p: LrpdParams, target) -> float:
    """``-2 log N(target | mu, Sigma) - 2N log(2 pi)`` from scipy's dense log-pdf."""
    logpdf = stats.multivariate_normal(mean=p.mu, cov=lrpd.dense_cov(p)).logpdf(target)
    return float(-2.0 * logpdf - p.dim * lrpd.LOG_2PI)


def finite_difference_grad(p: LrpdParams, target, h: float = 1e-5) -> lrpd.NllGrad:
    """Central differences of the per-target NLL with respect to every parameter."""

    def f(q):
        return float(np.mean(lrpd.nll(q, np.atleast_2d(target))))

    def partials(name, shape):
        base = getattr(p, name)
        out = np.zeros(shape)
        for idx in np.ndindex(*shape):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            out[idx] = (f(replace(p, **{name: up})) - f(replace(p, **{name: dn}))) / (2.0 * h)
        return out

    d_kappa = (f(replace(p, kappa=p.kappa + h)) - f(replace(p, kappa=max(p.kappa - h, 0.0)))) / (
        p.kappa + h - max(p.kappa - h, 0.0)
    )
    return lrpd.NllGrad(
        partials("mu", p.mu.shape),
        partials("log_d", p.log_d.shape),
        partials("L", p.L.shape),
        d_kappa,
    )


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


@dataclass
class OracleReport:
    trials: int = 0
    max_rel_err: dict = field(default_factory=lambda: {"logdet": 0.0, "mahalanobis": 0.0, "nll": 0.0})
    failures: list = field(default_factory=list)
    tol: float = 1e-8

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "tolerance": self.tol,
            "max_rel_err": self.max_rel_err,
            "failures": self.failures,
            "passed": self.passed,
        }


def oracle_sweep(seed: int, trials: int, tol: float = 1e-8) -> OracleReport:
    """Compare logdet, mahalanobis and nll with the dense oracles on random instances.

    Trials cycle through every (N, R) pair in ``ORACLE_N x ORACLE_R``.
    """
    report = OracleReport(tol=tol)
    combos = [(n, r) for n in ORACLE_N for r in ORACLE_R if r <= 2 * n]
    for t in range(trials):
        n, r = combos[t % len(combos)]
        gen = rng.stream(seed, t)
        p = lrpd.random_params(gen, n, r)
        target = p.mu + gen.normal(size=p.dim) * np.sqrt(p.marginal_var())
        got = {
            "logdet": lrpd.logdet(p),
            "mahalanobis": lrpd.mahalanobis(p, target - p.mu),
            "nll": lrpd.nll(p, target),
        }
        want = {
            "logdet": dense_logdet(p),
            "mahalanobis": dense_mahalanobis(p, target - p.mu),
            "nll": dense_nll(p, target),
        }
        for key in got:
            err = abs(got[key] - want[key]) / max(abs(want[key]), 1e-300)
            report.max_rel_err[key] = max(report.max_rel_err[key], err)
            if not err <= tol:
                report.failures.append({"trial": t, "n_points": n, "rank": r, "quantity": key, "rel_err": err})
        report.trials += 1
    return report
