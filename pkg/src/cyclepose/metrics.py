"""Instance matching, Jaccard index and panoptic quality."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels

THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class MatchReport:
    tau: float
    tp: int
    fp: int
    fn: int
    matched_ious: list[float] = field(default_factory=list)

    def __add__(self, other: "MatchReport") -> "MatchReport":
        if self.tau != other.tau:
            raise ValueError("cannot pool reports computed at different thresholds")
        return MatchReport(self.tau, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                           self.matched_ious + other.matched_ious)


@dataclass(frozen=True)
class PanopticQuality:
    pq: float
    sq: float
    dq: float


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (n_gt, n_pred), from a sparse label co-occurrence count.

    Labels need not be compact; rows/columns follow the sorted nonzero ids.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    g_ids, g_inv = np.unique(gt.ravel(), return_inverse=True)
    p_ids, p_inv = np.unique(pred.ravel(), return_inverse=True)
    # make index 0 mean background even if no pixel is background
    if g_ids[0] != 0:
        g_inv = g_inv + 1
    if p_ids[0] != 0:
        p_inv = p_inv + 1
    ng = int(np.count_nonzero(g_ids)) + 1
    npr = int(np.count_nonzero(p_ids)) + 1
    counts = kernels.contingency(g_inv.astype(np.int64), p_inv.astype(np.int64), ng, npr)
    inter = counts[1:, 1:].astype(np.float64)
    area_g = counts[1:, :].sum(axis=1).astype(np.float64)
    area_p = counts[:, 1:].sum(axis=0).astype(np.float64)
    union = area_g[:, None] + area_p[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def match_from_iou(iou: np.ndarray, tau: float) -> MatchReport:
    """One-to-one matching of pairs with IoU strictly above ``tau``.

    Maximises the number of matches first, then their total IoU.  For
    ``tau >= 0.5`` every object has at most one candidate and the matching
    is unique anyway.
    """
    n_gt, n_pred = iou.shape
    valid = iou > tau
    if not valid.any():
        return MatchReport(tau, 0, n_pred, n_gt, [])
    rows = np.flatnonzero(valid.any(axis=1))
    cols = np.flatnonzero(valid.any(axis=0))
    sub = iou[np.ix_(rows, cols)]
    big = min(len(rows), len(cols)) + 1.0
    score = np.where(sub > tau, big + sub, 0.0)
    r, c = linear_sum_assignment(score, maximize=True)
    ok = sub[r, c] > tau
    ious = sorted(float(v) for v in sub[r[ok], c[ok]])
    tp = len(ious)
    return MatchReport(tau, tp, n_pred - tp, n_gt - tp, ious)


def match_instances(pred: np.ndarray, gt: np.ndarray, tau: float) -> MatchReport:
    return match_from_iou(iou_matrix(pred, gt), tau)


def jaccard(report: MatchReport) -> float:
    denom = report.tp + report.fp + report.fn
    if denom == 0:
        return 1.0
    return report.tp / denom


def panoptic_quality(report: MatchReport) -> PanopticQuality:
    if report.tp + report.fp + report.fn == 0:
        return PanopticQuality(1.0, 1.0, 1.0)
    if report.tp == 0:
        return PanopticQuality(0.0, 0.0, 0.0)
    sq = float(np.mean(report.matched_ious))
    dq = report.tp / (report.tp + 0.5 * report.fp + 0.5 * report.fn)
    return PanopticQuality(sq * dq, sq, dq)


def _as_pairs(pred, gt) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(pred, np.ndarray) and pred.ndim == 2:
        return [(pred, gt)]
    pairs = list(zip(pred, gt))
    if len(pairs) != len(pred) or len(pairs) != len(gt):
        raise ValueError("prediction and ground-truth lists differ in length")
    return pairs


def sweep_reports(pred, gt, thresholds: Sequence[float] = THRESHOLDS) -> list[list[MatchReport]]:
    """Match reports per image and threshold, shape [n_images][n_thresholds]."""
    out = []
    for p, g in _as_pairs(pred, gt):
        iou = iou_matrix(p, g)
        out.append([match_from_iou(iou, t) for t in thresholds])
    return out


def _pool(column: Iterable[MatchReport]) -> MatchReport:
    column = list(column)
    total = MatchReport(column[0].tau, 0, 0, 0, [])
    for rep in column:
        total = total + rep
    return total


def jaccard_sweep(pred, gt, thresholds: Sequence[float] = THRESHOLDS, pooled: bool = True) -> dict:
    """JAC at 0.5 and averaged over ``thresholds``.

    With ``pooled`` (default) TP/FP/FN are summed over all images before the
    ratio is taken; otherwise per-image scores are averaged.
    """
    reports = sweep_reports(pred, gt, thresholds)
    if pooled:
        per_tau = [jaccard(_pool(col)) for col in zip(*reports)]
    else:
        per_tau = [float(np.mean([jaccard(r) for r in col])) for col in zip(*reports)]
    return {
        "thresholds": list(thresholds),
        "per_tau": per_tau,
        "jac_0.5": per_tau[list(thresholds).index(0.5)] if 0.5 in thresholds else float("nan"),
        "jac_mean": float(np.mean(per_tau)),
    }


def pq_sweep(pred, gt, thresholds: Sequence[float] = THRESHOLDS, pooled: bool = True) -> dict:
    reports = sweep_reports(pred, gt, thresholds)
    if pooled:
        per_tau = [panoptic_quality(_pool(col)).pq for col in zip(*reports)]
    else:
        per_tau = [float(np.mean([panoptic_quality(r).pq for r in col])) for col in zip(*reports)]
    return {
        "thresholds": list(thresholds),
        "per_tau": per_tau,
        "pq_0.5": per_tau[list(thresholds).index(0.5)] if 0.5 in thresholds else float("nan"),
        "pq_mean": float(np.mean(per_tau)),
    }


def evaluate(pred, gt, pooled: bool = True) -> dict:
    """Aggregate scores with the columns of the results tables."""
    jac = jaccard_sweep(pred, gt, pooled=pooled)
    pq = pq_sweep(pred, gt, pooled=pooled)
    return {
        "JAC_0.5:0.05:0.95": jac["jac_mean"],
        "JAC_0.5": jac["jac_0.5"],
        "PQ_0.5:0.05:0.95": pq["pq_mean"],
        "PQ_0.5": pq["pq_0.5"],
        "n_images": len(_as_pairs(pred, gt)),
        "pooled": pooled,
    }
