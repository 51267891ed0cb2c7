"""Center-matching count metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class CountMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    predicted_count: int
    gt_count: int

    def to_dict(self):
        return asdict(self)


def match_centers(pred, gt, radius):
    """Greedy one-to-one matching in ascending distance; returns (tp, fp, fn).

    Ties in distance are broken by (prediction index, gt index).
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        return 0, len(pred), len(gt)
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    pi, gi = np.nonzero(d <= radius)
    order = np.lexsort((gi, pi, d[pi, gi]))
    used_p = np.zeros(len(pred), bool)
    used_g = np.zeros(len(gt), bool)
    tp = 0
    for o in order:
        a, b = pi[o], gi[o]
        if used_p[a] or used_g[b]:
            continue
        used_p[a] = used_g[b] = True
        tp += 1
    return tp, len(pred) - tp, len(gt) - tp


def _ratio(num, den, empty):
    return empty if den == 0 else num / den


def prf1(tp, fp, fn):
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    both_empty = tp + fp == 0 and tp + fn == 0
    p = _ratio(tp, tp + fp, 1.0 if both_empty else 0.0)
    r = _ratio(tp, tp + fn, 1.0 if both_empty else 0.0)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return CountMetrics(int(tp), int(fp), int(fn), p, r, f, int(tp + fp), int(tp + fn))


def evaluate_counts(pred_centers, gt_centers, radius):
    return prf1(*match_centers(pred_centers, gt_centers, radius))
