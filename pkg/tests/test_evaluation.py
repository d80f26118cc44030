import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octhybrid.errors import ConfigError, InputValidationError, UndefinedStatisticError
from octhybrid.evaluation import (
    aggregate_scores,
    auc,
    confusion_at_threshold,
    delong_test,
    evaluate_scores,
    operating_point_at_specificity,
    roc_curve,
    sensitivity_at_specificity,
    subject_split,
)


def pair_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def sweep_sens_at_spec(scores, labels, target):
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    best = 0.0
    for t in np.r_[np.inf, np.unique(scores)]:
        call = scores >= t
        spec = np.mean(~call[labels == 0])
        if spec >= target:
            best = max(best, np.mean(call[labels == 1]))
    return best


def scored_labels(draw_n=st.integers(2, 40)):
    return st.tuples(draw_n, st.integers(0, 2**31 - 1))


def _instance(n, seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, n)]
    scores = np.round(rng.normal(size=labels.size) + labels, 1)  # rounding forces ties
    return scores, labels


# ---------------------------------------------------------------- split


def test_split_counts_use_ceiling():
    subjects = [f"n{i}" for i in range(106)] + [f"p{i}" for i in range(164)]
    groups = ["normal"] * 106 + ["pg"] * 164
    sp = subject_split(subjects, groups, 0.8, seed=3)
    tr = sorted(sp.train_subjects)
    assert sum(s.startswith("n") for s in tr) == 85
    assert sum(s.startswith("p") for s in tr) == 132
    assert not sp.train_subjects & sp.test_subjects
    assert sp == subject_split(subjects, groups, 0.8, seed=3)
    assert sp != subject_split(subjects, groups, 0.8, seed=4)


def test_split_keeps_scans_of_subject_together():
    subjects = ["a", "a", "b", "b", "c", "d", "d", "e"]
    groups = ["g1", "g1", "g1", "g1", "g2", "g2", "g2", "g2"]
    sp = subject_split(subjects, groups, 0.5, seed=0)
    train = sp.train_mask(subjects)
    for s in set(subjects):
        idx = [i for i, x in enumerate(subjects) if x == s]
        assert len(set(train[idx])) == 1
    with pytest.raises(ConfigError):
        subject_split(["a", "a"], ["g1", "g2"])


# ---------------------------------------------------------------- AUC and ROC


@given(scored_labels())
@settings(max_examples=200, deadline=None)
def test_auc_equals_pair_count_and_trapezoid(case):
    scores, labels = _instance(*case)
    a = auc(scores, labels)
    assert abs(a - pair_auc(scores, labels)) <= 1e-12
    assert abs(roc_curve(scores, labels).trapezoid_area() - a) <= 1e-12


@given(scored_labels())
@settings(max_examples=50, deadline=None)
def test_auc_reversal_and_monotone_invariance(case):
    scores, labels = _instance(*case)
    a = auc(scores, labels)
    assert auc(-scores, labels) == pytest.approx(1 - a, abs=1e-12)
    assert auc(np.exp(scores) * 3 + 1, labels) == pytest.approx(a, abs=1e-12)


def test_auc_all_ties_is_half():
    assert auc(np.zeros(6), [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_needs_both_classes():
    with pytest.raises(UndefinedStatisticError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(InputValidationError):
        auc([0.1, np.nan], [0, 1])


def test_roc_endpoints_and_steps():
    roc = roc_curve([0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0])
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.array_equal(roc.fpr, [0, 0, 0.5, 1])
    assert np.array_equal(roc.tpr, [0, 0.5, 1, 1])


@given(scored_labels(), st.sampled_from([0.5, 0.8, 0.95, 0.99]))
@settings(max_examples=100, deadline=None)
def test_sensitivity_at_specificity_matches_sweep(case, target):
    scores, labels = _instance(*case)
    assert sensitivity_at_specificity(scores, labels, target) == pytest.approx(
        sweep_sens_at_spec(scores, labels, target), abs=1e-12)


def test_operating_point_degenerate_flag():
    # every negative outscores every positive: only the all-negative call keeps spec 1
    op = operating_point_at_specificity([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1], 0.99)
    assert op.degenerate and op.sensitivity == 0.0 and op.specificity == 1.0
    with pytest.raises(ConfigError):
        operating_point_at_specificity([0.1, 0.2], [0, 1], 1.5)


def test_confusion_extremes():
    labels = np.array([0, 1, 1, 0, 1])
    c = confusion_at_threshold(np.ones(5), labels, 0.5)
    assert c["sensitivity"] == 1.0 and c["specificity"] == 0.0
    c = confusion_at_threshold(np.zeros(5), labels, 0.5)
    assert c["sensitivity"] == 0.0 and c["specificity"] == 1.0
    c = confusion_at_threshold([0.5, 0.49], [1, 0], 0.5)
    assert c["accuracy"] == 1.0
    assert math.isnan(confusion_at_threshold([0.3], [0])["sensitivity"])


def test_evaluate_scores_flags():
    m = evaluate_scores("x", [0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])
    assert "no_operating_point_at_0.95" in m.flags
    assert m.auc == 0.0


def test_aggregate_scores_by_eye():
    s, lab, keys = aggregate_scores([0.2, 0.4, 0.9], [0, 0, 1], ["e1", "e1", "e2"])
    assert np.allclose(s, [0.3, 0.9]) and list(lab) == [0, 1] and list(keys) == ["e1", "e2"]
    with pytest.raises(InputValidationError):
        aggregate_scores([0.2, 0.4], [0, 1], ["e1", "e1"])


# ---------------------------------------------------------------- DeLong


def test_delong_identical_scores():
    rng = np.random.default_rng(0)
    labels = np.r_[np.zeros(20), np.ones(20)]
    s = rng.normal(size=40) + labels
    r = delong_test(s, s, labels)
    assert r.p_value == 1.0 and r.z == 0.0 and r.diff == 0.0


def test_delong_swap_negates_z():
    rng = np.random.default_rng(1)
    labels = np.r_[np.zeros(30), np.ones(30)]
    a = rng.normal(size=60) + labels
    b = a + rng.normal(0, 1.0, 60)
    ab, ba = delong_test(a, b, labels), delong_test(b, a, labels)
    assert ab.z == pytest.approx(-ba.z, rel=1e-12)
    assert ab.p_value == pytest.approx(ba.p_value, rel=1e-12)
    assert ab.auc_a == pytest.approx(auc(a, labels), abs=1e-12)


def _delong_oracle(a, b, labels):
    """Direct placement-value computation with explicit loops."""
    labels = np.asarray(labels)
    comps = []
    for s in (a, b):
        x, y = s[labels == 1], s[labels == 0]
        psi = lambda u, v: 1.0 if u > v else 0.5 if u == v else 0.0
        v10 = np.array([np.mean([psi(xi, yj) for yj in y]) for xi in x])
        v01 = np.array([np.mean([psi(xi, yj) for xi in x]) for yj in y])
        comps.append((v10, v01))
    s10 = np.cov(np.vstack([comps[0][0], comps[1][0]]))
    s01 = np.cov(np.vstack([comps[0][1], comps[1][1]]))
    s = s10 / len(comps[0][0]) + s01 / len(comps[0][1])
    return comps[0][0].mean() - comps[1][0].mean(), s[0, 0] + s[1, 1] - 2 * s[0, 1]


def test_delong_matches_loop_oracle_with_ties():
    rng = np.random.default_rng(2)
    labels = np.r_[np.zeros(15), np.ones(12)]
    a = np.round(rng.normal(size=27) + labels, 1)
    b = np.round(a + rng.normal(0, 1, 27), 1)
    r = delong_test(a, b, labels)
    diff, var = _delong_oracle(a, b, labels)
    assert r.diff == pytest.approx(diff, abs=1e-12)
    assert r.var_diff == pytest.approx(var, rel=1e-10)


def test_delong_length_mismatch():
    with pytest.raises(InputValidationError):
        delong_test([0.1, 0.2], [0.1], [0, 1])
