"""Verification metrics: EER, min-DCF and bootstrap confidence intervals.

Thresholds accept a trial when ``score >= t``. The EER is read off the
convex hull of the ROC operating points (linear interpolation between
hull vertices); hull construction runs on integer error counts and the
final crossing is evaluated in exact rational arithmetic.
"""

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # bool, True = target

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError(
                f"scores {self.scores.shape} and labels {self.labels.shape} must be equal 1-D")
        if self.labels.all() or not self.labels.any():
            raise ValueError("need at least one target and one nontarget trial")

    @classmethod
    def from_target_nontarget(cls, tar, non):
        tar, non = np.asarray(tar, dtype=np.float64), np.asarray(non, dtype=np.float64)
        return cls(np.concatenate([tar, non]),
                   np.concatenate([np.ones(tar.size, bool), np.zeros(non.size, bool)]))

    @property
    def targets(self):
        return self.scores[self.labels]

    @property
    def nontargets(self):
        return self.scores[~self.labels]


def error_counts(tar, non):
    """Miss and false-alarm counts at every distinct threshold plus +inf.

    Returns ``(thresholds, n_miss, n_fa)`` with thresholds ascending.
    """
    tar = np.sort(np.asarray(tar, dtype=np.float64))
    non = np.sort(np.asarray(non, dtype=np.float64))
    thr = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    n_miss = np.searchsorted(tar, thr, side="left")
    n_fa = non.size - np.searchsorted(non, thr, side="left")
    return thr, n_miss, n_fa


def det_curve(s):
    """(P_fa, P_miss) at every operating point, thresholds ascending."""
    _, n_miss, n_fa = error_counts(s.targets, s.nontargets)
    return n_fa / s.nontargets.size, n_miss / s.targets.size


def _crossing(x0, y0, x1, y1, n_tar, n_non):
    # exact point where P_miss == P_fa on the segment between two integer-count points
    d0 = Fraction(int(y0), n_tar) - Fraction(int(x0), n_non)
    d1 = Fraction(int(y1), n_tar) - Fraction(int(x1), n_non)
    if d0 == d1:
        return Fraction(int(x0), n_non)
    lam = d0 / (d0 - d1)
    return Fraction(int(x0), n_non) + lam * (Fraction(int(x1), n_non) - Fraction(int(x0), n_non))


def _lower_hull(xs, ys):
    hull = []
    for x, y in zip(xs, ys):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # drop the middle point unless it turns strictly counter-clockwise
            if (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append((x, y))
    return hull


def _eer_fraction(tar, non):
    _, n_miss, n_fa = error_counts(tar, non)
    n_tar, n_non = len(tar), len(non)
    # walk with false alarms ascending; scale so both axes are integer counts
    xs = (n_fa[::-1] * n_tar).tolist()
    ys = (n_miss[::-1] * n_non).tolist()
    hull = _lower_hull(xs, ys)
    total = n_tar * n_non
    for (x0, y0), (x1, y1) in zip(hull, hull[1:]):
        if y0 - x0 >= 0 >= y1 - x1:
            return _crossing(x0 // n_tar, y0 // n_non, x1 // n_tar, y1 // n_non, n_tar, n_non)
    x0, y0 = hull[0]
    return Fraction(x0, total)


def eer(s):
    """Equal error rate in percent."""
    return float(100 * _eer_fraction(s.targets, s.nontargets))


def min_dcf(s, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Minimum normalised detection cost over all thresholds."""
    if not 0 < p_target < 1:
        raise ValueError(f"p_target must be in (0, 1), got {p_target}")
    if c_miss <= 0 or c_fa <= 0:
        raise ValueError("costs must be positive")
    _, n_miss, n_fa = error_counts(s.targets, s.nontargets)
    # +inf already rejects everything; also allow accepting everything
    n_miss = np.append(0, n_miss)
    n_fa = np.append(s.nontargets.size, n_fa)
    cost = dcf_cost(n_miss / s.targets.size, n_fa / s.nontargets.size, p_target, c_miss, c_fa)
    return float(cost.min())


def dcf_cost(p_miss, p_fa, p_target, c_miss, c_fa):
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    return (c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa) / norm


def _resample(s, rng):
    tar_idx = np.flatnonzero(s.labels)
    non_idx = np.flatnonzero(~s.labels)
    return np.concatenate([rng.choice(tar_idx, tar_idx.size), rng.choice(non_idx, non_idx.size)])


def _percentile_interval(values, confidence):
    alpha = 100 * (1 - confidence) / 2
    lo, hi = np.percentile(values, [alpha, 100 - alpha])
    return float(lo), float(hi)


def bootstrap_eer_ci(s, n_boot=1000, confidence=0.95, rng=None):
    """Percentile interval of the EER (percent) under stratified trial resampling."""
    if n_boot < 100:
        raise ValueError(f"n_boot must be >= 100, got {n_boot}")
    rng = np.random.default_rng(rng)
    reps = []
    for _ in range(n_boot):
        idx = _resample(s, rng)
        reps.append(float(100 * _eer_fraction(s.scores[idx][s.labels[idx]],
                                              s.scores[idx][~s.labels[idx]])))
    return _percentile_interval(reps, confidence)


def eer_diff_significant(sa, sb, n_boot=1000, confidence=0.95, rng=None):
    """Paired bootstrap of EER(A) - EER(B) over the same trials.

    Returns ``(significant, (low, high))``; significant when the interval
    excludes zero.
    """
    if n_boot < 100:
        raise ValueError(f"n_boot must be >= 100, got {n_boot}")
    if not np.array_equal(sa.labels, sb.labels):
        raise ValueError("paired comparison needs identical trial labels")
    rng = np.random.default_rng(rng)
    diffs = []
    for _ in range(n_boot):
        idx = _resample(sa, rng)
        lab = sa.labels[idx]
        ea = _eer_fraction(sa.scores[idx][lab], sa.scores[idx][~lab])
        eb = _eer_fraction(sb.scores[idx][lab], sb.scores[idx][~lab])
        diffs.append(float(100 * (ea - eb)))
    lo, hi = _percentile_interval(diffs, confidence)
    return bool(lo > 0 or hi < 0), (lo, hi)


def report(s, n_boot=1000, confidence=0.95, seed=0, p_target=0.01):
    lo, hi = bootstrap_eer_ci(s, n_boot, confidence, np.random.default_rng(seed))
    return {
        "eer_pct": eer(s),
        "min_dcf": min_dcf(s, p_target),
        "ci_low": lo,
        "ci_high": hi,
        "n_target": int(s.labels.sum()),
        "n_nontarget": int((~s.labels).sum()),
    }


def format_report(rep):
    return json.dumps(rep, sort_keys=True)


def write_det_csv(s, path):
    p_fa, p_miss = det_curve(s)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("p_fa,p_miss\n")
        for a, b in zip(p_fa, p_miss):
            fh.write(f"{a:.8f},{b:.8f}\n")
