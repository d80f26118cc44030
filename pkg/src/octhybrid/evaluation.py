"""Subject-level splitting and diagnostic-accuracy statistics.

Conventions: a case is called positive when ``score >= threshold``; ROC
operating points are steps, never interpolated; ties count one half.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ConfigError, InputValidationError, UndefinedStatisticError

DELONG_VAR_FLOOR = 1e-15


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitAssignment:
    train_subjects: frozenset
    test_subjects: frozenset
    fraction: float
    seed: int

    def fold(self, subject):
        if subject in self.train_subjects:
            return "train"
        if subject in self.test_subjects:
            return "test"
        raise KeyError(subject)

    def train_mask(self, subjects):
        return np.array([s in self.train_subjects for s in subjects], dtype=bool)

    def test_mask(self, subjects):
        return np.array([s in self.test_subjects for s in subjects], dtype=bool)


def subject_split(subjects, groups, fraction=0.8, seed=0) -> SplitAssignment:
    """Stratified subject split; ``ceil(fraction * n)`` subjects per group go to train.

    ``subjects`` and ``groups`` are parallel per-scan (or per-subject)
    sequences. Every subject must belong to exactly one group.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("split fraction must lie in (0, 1]")
    by_group: dict = {}
    seen: dict = {}
    for s, g in zip(subjects, groups):
        if seen.setdefault(s, g) != g:
            raise ConfigError(f"subject {s!r} appears in groups {seen[s]!r} and {g!r}")
        by_group.setdefault(g, set()).add(s)
    rng = np.random.default_rng(seed)
    train, test = set(), set()
    for g in sorted(by_group, key=str):
        members = sorted(by_group[g], key=str)
        if len(members) < 2:
            raise ConfigError(f"group {g!r} has fewer than 2 subjects")
        order = rng.permutation(len(members))
        k = math.ceil(fraction * len(members) - 1e-9)
        train.update(members[i] for i in order[:k])
        test.update(members[i] for i in order[k:])
    return SplitAssignment(frozenset(train), frozenset(test), float(fraction), int(seed))


def aggregate_scores(scores, labels, keys):
    """Mean score per key (e.g. per eye); returns (scores, labels, keys)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    uniq, inv = np.unique(np.asarray(keys), return_inverse=True)
    sums = np.bincount(inv, weights=scores)
    counts = np.bincount(inv)
    lab = np.zeros(len(uniq), dtype=labels.dtype)
    lab[inv] = labels
    if np.any(lab[inv] != labels):
        raise InputValidationError("scans sharing a key carry different labels")
    return sums / counts, lab, uniq


# ---------------------------------------------------------------- ROC


def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InputValidationError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise InputValidationError("scores must be finite")
    pos = labels == 1
    if not np.all(pos | (labels == 0)):
        raise InputValidationError("labels must be 0 or 1")
    if pos.all() or not pos.any():
        raise UndefinedStatisticError("both classes are needed")
    return scores, pos


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos = neg)."""
    scores, pos = _split_classes(scores, labels)
    n1 = int(pos.sum())
    n0 = scores.size - n1
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class ROCResult:
    """Operating points in order of decreasing threshold.

    The first point (threshold +inf) is (0, 0) and the last (lowest score)
    is (1, 1).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def trapezoid_area(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def roc_curve(scores, labels) -> ROCResult:
    scores, pos = _split_classes(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[s[1:] != s[:-1], True]  # final index of each tie block
    tpr = np.r_[0, tp[last]] / tp[-1]
    fpr = np.r_[0, fp[last]] / fp[-1]
    thr = np.r_[np.inf, s[last]]
    return ROCResult(thr, fpr, tpr, auc(scores, pos.astype(int)))


@dataclass(frozen=True)
class OperatingPoint:
    sensitivity: float
    specificity: float
    threshold: float
    degenerate: bool  # only the call-nothing-positive point qualified


def operating_point_at_specificity(scores, labels, target_spec) -> OperatingPoint:
    """Highest-sensitivity step point whose specificity is at least ``target_spec``."""
    if not 0.0 <= target_spec <= 1.0:
        raise ConfigError("target specificity must lie in [0, 1]")
    roc = roc_curve(scores, labels)
    spec = 1.0 - roc.fpr
    ok = np.flatnonzero(spec >= target_spec - 1e-12)
    best = ok[np.argmax(roc.tpr[ok])]
    # among ties on sensitivity prefer the higher specificity (earliest point)
    best = ok[roc.tpr[ok] == roc.tpr[best]][0]
    degenerate = bool(len(ok) == 1 and best == 0)
    return OperatingPoint(float(roc.tpr[best]), float(spec[best]), float(roc.thresholds[best]), degenerate)


def sensitivity_at_specificity(scores, labels, target_spec) -> float:
    return operating_point_at_specificity(scores, labels, target_spec).sensitivity


def confusion_at_threshold(scores, labels, threshold=0.5) -> dict:
    """Accuracy, sensitivity and specificity with positive when ``score >= threshold``.

    Sensitivity (specificity) is NaN when no positive (negative) case exists.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape or scores.size == 0:
        raise InputValidationError("scores and labels must be non-empty and equally long")
    call = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(call & pos))
    tn = int(np.sum(~call & ~pos))
    n1 = int(pos.sum())
    n0 = labels.size - n1
    return {
        "accuracy": (tp + tn) / labels.size,
        "sensitivity": tp / n1 if n1 else float("nan"),
        "specificity": tn / n0 if n0 else float("nan"),
        "tp": tp,
        "fp": n0 - tn,
        "tn": tn,
        "fn": n1 - tp,
    }


# ---------------------------------------------------------------- DeLong


@dataclass(frozen=True)
class ComparisonResult:
    auc_a: float
    auc_b: float
    diff: float
    var_diff: float
    z: float
    p_value: float

    def to_dict(self):
        return {k: float(v) for k, v in self.__dict__.items()}


def _placements(scores, pos):
    """DeLong structural components (V10 for positives, V01 for negatives)."""
    x = scores[pos]
    y = scores[~pos]
    n1, n0 = x.size, y.size
    r_all = rankdata(scores)
    v10 = (r_all[pos] - rankdata(x)) / n0
    v01 = 1.0 - (r_all[~pos] - rankdata(y)) / n1
    return v10, v01


def delong_test(scores_a, scores_b, labels) -> ComparisonResult:
    """Paired DeLong comparison of two correlated AUCs (two-sided normal p)."""
    a = np.asarray(scores_a, dtype=float).ravel()
    b = np.asarray(scores_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InputValidationError(f"score vectors differ in length ({a.size} vs {b.size})")
    a, pos = _split_classes(a, labels)
    b, _ = _split_classes(b, labels)
    va10, va01 = _placements(a, pos)
    vb10, vb01 = _placements(b, pos)
    auc_a = float(va10.mean())
    auc_b = float(vb10.mean())
    s10 = np.cov(np.vstack([va10, vb10]), ddof=1)
    s01 = np.cov(np.vstack([va01, vb01]), ddof=1)
    s = s10 / va10.size + s01 / va01.size
    var = float(s[0, 0] + s[1, 1] - 2.0 * s[0, 1])
    diff = auc_a - auc_b
    if var < DELONG_VAR_FLOOR:
        return ComparisonResult(auc_a, auc_b, diff, max(var, 0.0), 0.0, 1.0)
    z = diff / math.sqrt(var)
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return ComparisonResult(auc_a, auc_b, diff, var, float(z), p)


def bootstrap_auc_diff_p(scores_a, scores_b, labels, n_boot=10_000, seed=0):
    """Paired stratified bootstrap p for AUC(a) - AUC(b) = 0 (normal approximation).

    Resamples positives and negatives separately, recomputes both AUCs on
    each replicate, and returns ``2 * sf(|diff| / sd_boot)``.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    rng = np.random.default_rng(seed)
    diffs = np.empty(n_boot)
    for k in range(n_boot):
        idx = np.r_[rng.choice(pos, pos.size), rng.choice(neg, neg.size)]
        lab = labels[idx]
        diffs[k] = auc(a[idx], lab) - auc(b[idx], lab)
    observed = auc(a, labels) - auc(b, labels)
    sd = diffs.std(ddof=1)
    if sd == 0:
        return 1.0
    return float(2.0 * norm.sf(abs(observed) / sd))


# ---------------------------------------------------------------- exports


@dataclass
class ModelMetrics:
    model: str
    n: int
    auc: float
    sens_at_95: float
    sens_at_99: float
    accuracy: float
    sensitivity: float
    specificity: float
    flags: list = field(default_factory=list)


def evaluate_scores(model, scores, labels, threshold=0.5) -> ModelMetrics:
    flags = []
    sens = {}
    for target in (0.95, 0.99):
        op = operating_point_at_specificity(scores, labels, target)
        sens[target] = op.sensitivity
        if op.degenerate:
            flags.append(f"no_operating_point_at_{target:.2f}")
    conf = confusion_at_threshold(scores, labels, threshold)
    return ModelMetrics(
        model, int(np.size(labels)), auc(scores, labels), sens[0.95], sens[0.99],
        conf["accuracy"], conf["sensitivity"], conf["specificity"], flags,
    )


METRIC_COLUMNS = (
    "model", "n", "auc", "sens_at_95", "sens_at_99", "accuracy", "sensitivity",
    "specificity", "flags", "split_seed", "unit",
)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(path, rows, split_seed, unit="scan"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in rows:
            if m is None:
                continue
            w.writerow([
                m.model, m.n, _fmt(m.auc), _fmt(m.sens_at_95), _fmt(m.sens_at_99),
                _fmt(m.accuracy), _fmt(m.sensitivity), _fmt(m.specificity),
                ";".join(m.flags), split_seed, unit,
            ])


def write_roc_csv(path, roc: ROCResult, split_seed, unit="scan"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fpr", "tpr", "split_seed", "unit"))
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow((_fmt(t), _fmt(f), _fmt(p), split_seed, unit))


def write_comparisons_json(path, comparisons: dict, split_seed, unit="scan"):
    doc = {
        "split_seed": split_seed,
        "unit": unit,
        "method": "delong",
        "pairs": [
            {"model_a": a, "model_b": b, **res.to_dict()} for (a, b), res in comparisons.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
