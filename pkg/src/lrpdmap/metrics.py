"""Map and trajectory evaluation: Chamfer-matched AP/mAP, minADE, minFDE, miss rate.

Conventions
-----------
* Chamfer distance is the average of the two directed *mean* nearest-point
  distances, so it does not grow with sampling density.
* AP matching is greedy in descending score order (stable, so equal scores
  keep their input order). Each prediction takes the closest still-unmatched
  ground truth of its class in the same scene (lowest index on distance
  ties) and is a true positive if that distance is within the threshold.
  Every ground truth is matched at most once.
* The precision-recall curve is integrated over all points using the
  monotone precision envelope (no 11- or 101-point sampling).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from lrpdmap.geometry import Polyline

THRESHOLDS = (0.5, 1.0, 1.5)
MISS_THRESHOLD = 2.0
N_MODES = 6


def _points(p) -> np.ndarray:
    return p.points if isinstance(p, Polyline) else np.asarray(p, dtype=np.float64).reshape(-1, 2)


def chamfer(a, b) -> float:
    """Bidirectional mean Chamfer distance between two point sets, in meters."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    d = cdist(pa, pb)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


@dataclass(frozen=True)
class PredElement:
    score: float
    class_idx: int
    polyline: Polyline

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score!r} outside [0, 1]")
        if self.class_idx < 0:
            raise ValueError("class index must be >= 0")


@dataclass(frozen=True)
class MapPredictionSet:
    """Scored element predictions for one scene."""

    elements: tuple[PredElement, ...]
    scene: str = ""

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "elements": [{"class": e.class_idx, "score": e.score, "points": e.polyline.to_list()} for e in self.elements],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MapPredictionSet:
        """Read predictions; elements may carry ``points`` or LRPD ``params`` (the mean is used)."""
        from lrpdmap.lrpd import LrpdParams

        elems = []
        for e in doc["elements"]:
            poly = Polyline(e["points"]) if "points" in e else LrpdParams.from_dict(e["params"]).mean_polyline()
            elems.append(PredElement(float(e["score"]), int(e["class"]), poly))
        return cls(tuple(elems), doc.get("scene", ""))


GtScene = Sequence[tuple[int, Polyline]]


def match_predictions(preds: Sequence[MapPredictionSet], gts: Sequence[GtScene], class_idx: int, threshold: float):
    """Greedy matching for one class. Returns (scores, is_tp) in ranked order and the GT count."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction scenes vs {len(gts)} ground-truth scenes")
    gt_polys = [[p for c, p in scene if c == class_idx] for scene in gts]
    n_gt = sum(len(g) for g in gt_polys)
    ranked = [
        (e.score, s, i, e.polyline)
        for s, scene in enumerate(preds)
        for i, e in enumerate(scene.elements)
        if e.class_idx == class_idx
    ]
    ranked.sort(key=lambda r: -r[0])
    matched = [np.zeros(len(g), dtype=bool) for g in gt_polys]
    is_tp = np.zeros(len(ranked), dtype=bool)
    for k, (_, s, _, poly) in enumerate(ranked):
        free = np.flatnonzero(~matched[s])
        if free.size == 0:
            continue
        dists = np.array([chamfer(poly, gt_polys[s][j]) for j in free])
        j = int(np.argmin(dists))
        if dists[j] <= threshold:
            matched[s][free[j]] = True
            is_tp[k] = True
    return np.array([r[0] for r in ranked]), is_tp, n_gt


def ap_from_matches(is_tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    precision = tp / np.arange(1, is_tp.size + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def average_precision(preds, gts, class_idx: int, threshold: float) -> float | None:
    """AP for one class at one Chamfer threshold, or ``None`` when no scene has GT of that class."""
    _, is_tp, n_gt = match_predictions(preds, gts, class_idx, threshold)
    if n_gt == 0:
        return None
    return ap_from_matches(is_tp, n_gt)


@dataclass
class MapScore:
    ap: dict[int, dict[float, float | None]] = field(default_factory=dict)
    mAP: float = 0.0

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        def name(c):
            return class_names[c] if class_names and c < len(class_names) else str(c)

        return {
            "mAP": self.mAP,
            "ap": {name(c): {f"{t:g}": v for t, v in per.items()} for c, per in self.ap.items()},
            "class_mAP": {
                name(c): (float(np.mean(vals)) if (vals := [v for v in per.values() if v is not None]) else None)
                for c, per in self.ap.items()
            },
        }


def map_score(preds, gts, n_classes: int, thresholds: Sequence[float] = THRESHOLDS) -> MapScore:
    """Mean of AP over every (class, threshold) pair whose AP is defined."""
    if n_classes < 1:
        raise ValueError("need at least one class")
    score = MapScore()
    defined = []
    for c in range(n_classes):
        score.ap[c] = {}
        for t in thresholds:
            ap = average_precision(preds, gts, c, t)
            score.ap[c][t] = ap
            if ap is not None:
                defined.append(ap)
    if not defined:
        raise ValueError("no class has ground truth; mAP is undefined")
    score.mAP = float(np.mean(defined))
    return score


@dataclass(frozen=True)
class TrajectoryPredictionSet:
    """Multi-modal forecasts: ``modes`` (A, K, T, 2) and ``probs`` (A, K)."""

    modes: np.ndarray
    probs: np.ndarray
    k: int = N_MODES

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.float64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if modes.ndim != 4 or modes.shape[-1] != 2:
            raise ValueError(f"modes must be (agents, K, T, 2), got {modes.shape}")
        if modes.shape[1] != self.k:
            raise ValueError(f"expected exactly {self.k} modes per agent, got {modes.shape[1]}")
        if probs.shape != modes.shape[:2]:
            raise ValueError(f"probs shape {probs.shape} does not match modes {modes.shape[:2]}")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("mode probabilities must sum to 1 per agent")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "probs", probs)

    @property
    def horizon(self) -> int:
        return self.modes.shape[2]

    def to_dict(self) -> dict:
        return {"agents": [{"modes": m.tolist(), "probs": p.tolist()} for m, p in zip(self.modes, self.probs)]}

    @classmethod
    def from_dict(cls, doc: dict, k: int = N_MODES) -> TrajectoryPredictionSet:
        agents = doc["agents"]
        return cls(np.array([a["modes"] for a in agents]), np.array([a["probs"] for a in agents]), k)


def _errors(pred: TrajectoryPredictionSet, gt) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != (pred.modes.shape[0], pred.horizon, 2):
        raise ValueError(f"ground truth shape {gt.shape} does not match predictions {pred.modes.shape}")
    return np.linalg.norm(pred.modes - gt[:, None], axis=-1)  # (A, K, T)


def min_ade(pred: TrajectoryPredictionSet, gt) -> float:
    return float(_errors(pred, gt).mean(axis=2).min(axis=1).mean())


def min_fde(pred: TrajectoryPredictionSet, gt) -> float:
    return float(_errors(pred, gt)[:, :, -1].min(axis=1).mean())


def miss_rate(pred: TrajectoryPredictionSet, gt, threshold: float = MISS_THRESHOLD) -> float:
    return float(np.mean(_errors(pred, gt)[:, :, -1].min(axis=1) > threshold))


def trajectory_metrics(pred: TrajectoryPredictionSet, gt) -> dict:
    return {
        f"minADE_{pred.k}": min_ade(pred, gt),
        f"minFDE_{pred.k}": min_fde(pred, gt),
        f"MR_{pred.k}": miss_rate(pred, gt),
    }
