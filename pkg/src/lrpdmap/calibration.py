"""Error-versus-predicted-uncertainty tables for calibration plots."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lrpdmap.lrpd import LrpdParams


@dataclass(frozen=True)
class CalibrationTable:
    element: np.ndarray
    coord: np.ndarray
    error: np.ndarray  # |residual|, meters
    std: np.ndarray  # predicted marginal std, meters

    @property
    def pearson(self) -> float | None:
        """Pearson correlation of |error| with std; ``None`` if either column is constant."""
        if self.error.size < 2 or np.ptp(self.error) == 0 or np.ptp(self.std) == 0:
            return None
        return float(np.corrcoef(self.error, self.std)[0, 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["element", "coord", "abs_error", "pred_std"])
        for row in zip(self.element, self.coord, self.error, self.std):
            w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3]))])
        return buf.getvalue()


def calib_export(params: Sequence[LrpdParams], residuals: Sequence) -> CalibrationTable:
    """Pair every residual coordinate with the predicted marginal std of that coordinate.

    ``residuals[k]`` is one residual vector or an ``(M, 2N)`` stack for
    element ``k``; the std is the square root of the diagonal of the dense
    covariance of ``params[k]``.
    """
    if len(params) != len(residuals):
        raise ValueError(f"{len(params)} parameter sets vs {len(residuals)} residual sets")
    el, co, err, std = [], [], [], []
    for k, (p, r) in enumerate(zip(params, residuals)):
        r = np.atleast_2d(np.asarray(r, dtype=np.float64))
        if r.shape[1] != p.dim:
            raise ValueError(f"element {k}: residual length {r.shape[1]} != {p.dim}")
        sd = np.sqrt(p.marginal_var())
        el.append(np.full(r.size, k))
        co.append(np.tile(np.arange(p.dim), r.shape[0]))
        err.append(np.abs(r).reshape(-1))
        std.append(np.tile(sd, r.shape[0]))
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    return CalibrationTable(cat(el, int), cat(co, int), cat(err, float), cat(std, float))
