"""EER and minimum detection cost.

Convention: a trial is accepted when ``score >= threshold``. Candidate
thresholds are the distinct scores plus ``+inf`` (reject everything).
"""

from __future__ import annotations

import numpy as np


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    tar, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if tar.size == 0 or non.size == 0:
        raise ValueError("need both target and nontarget trials")
    return scores, tar, non


def operating_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, P_miss, P_fa) for increasing thresholds."""
    scores, tar, non = _split(scores, labels)
    thr = np.append(np.unique(scores), np.inf)
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, p_miss, p_fa


def eer_from_points(thr, p_miss, p_fa) -> tuple[float, float]:
    """Interpolate the P_miss = P_fa crossing between adjacent operating points."""
    d = p_miss - p_fa
    i = int(np.argmax(d >= 0))  # d is nondecreasing, d[0] = -1 and d[-1] = 1
    a, b = i - 1, i
    lam = -d[a] / (d[b] - d[a])
    eer = p_miss[a] + lam * (p_miss[b] - p_miss[a])
    t = thr[a] if not np.isfinite(thr[b]) else thr[a] + lam * (thr[b] - thr[a])
    return float(eer), float(t)


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate (as a fraction) and the interpolated threshold."""
    return eer_from_points(*operating_points(scores, labels))


def compute_min_dcf(scores, labels, p_target: float, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> tuple[float, float]:
    """Normalized minimum DCF and the threshold achieving it."""
    if not 0.0 < p_target < 1.0:
        raise ValueError("p_target must lie strictly between 0 and 1")
    thr, p_miss, p_fa = operating_points(scores, labels)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    i = int(np.argmin(cost))
    return float(cost[i] / min(c_miss * p_target, c_fa * (1.0 - p_target))), float(thr[i])
