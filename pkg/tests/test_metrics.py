import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bislot import metrics as M
from bislot.tensor import Rng


# ---------------------------------------------------------------------------
# correspondence


def test_rho_examples():
    assert M.rho(np.full((8, 8), 1 / 8)) == 0.125
    assert M.rho(np.eye(5)) == 1.0
    assert M.rho(np.eye(4)[[1, 2, 3, 0]]) == 0.0
    with pytest.raises(ValueError):
        M.rho(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        M.rho(-np.eye(3))


def test_rho_invariant_under_joint_permutation():
    c = Rng(0).uniform((6, 6))
    perm = Rng(1).permutation(6)
    assert math.isclose(M.rho(c), M.rho(c[np.ix_(perm, perm)]), rel_tol=1e-12)


def test_off_diag_examples():
    assert M.off_diag_row_max(np.eye(4)) == 0.0
    assert M.off_diag_row_max(np.full((8, 8), 1 / 8)) == 0.125


def test_off_diag_matches_scalar_oracle():
    c = Rng(2).uniform((5, 5))
    ref = 0.0
    for i in range(5):
        tot = sum(c[i])
        ref += max(c[i, j] / tot for j in range(5) if j != i)
    assert abs(M.off_diag_row_max(c) - ref / 5) <= 1e-12


def test_entropy_examples():
    assert abs(M.attention_entropy(np.full((8, 8), 1 / 8)) - 3.0) <= 1e-12
    assert M.attention_entropy(np.eye(8)) == 0.0
    row = np.zeros((1, 8))
    row[0, :2] = 0.5
    assert M.attention_entropy(row) == 1.0


# ---------------------------------------------------------------------------
# representation


def test_fisher_identical_means_zero():
    x = np.array([[1.0, 2.0], [-1.0, -2.0], [1.0, 2.0], [-1.0, -2.0]])
    assert abs(M.fisher_ratio(x + [0.5, 0.1], [0, 0, 1, 1])) <= 1e-12


def test_fisher_one_dimensional_closed_form():
    # classes at -1 and +1, within-class deviations +-1: S_W = 4, S_B = 4
    x = np.array([[-2.0], [0.0], [0.0], [2.0]])
    y = [0, 0, 1, 1]
    assert abs(M.fisher_ratio(x, y, reg=0.0) - 1.0) <= 1e-12


def test_fisher_invariant_under_linear_map():
    r = Rng(3)
    x = r.normal((60, 4)) + np.repeat(r.normal((3, 4), 2.0), 20, axis=0)
    y = np.repeat([0, 1, 2], 20)
    a = r.normal((4, 4)) + 3 * np.eye(4)
    assert abs(M.fisher_ratio(x, y, reg=1e-12) - M.fisher_ratio(x @ a.T, y, reg=1e-12)) <= 1e-6


def test_fisher_errors():
    with pytest.raises(ValueError):
        M.fisher_ratio(np.zeros((4, 2)), [0, 0, 0, 0])
    with pytest.raises(ValueError):
        M.fisher_ratio(np.zeros((3, 5)), [0, 1, 1])


def test_spatial_variance_examples():
    g = 4
    one = np.zeros((1, g * g))
    one[0, 5] = 1.0
    assert M.spatial_variance(one, g)[0] == 0.0
    uni = np.ones((1, g * g))
    assert abs(M.spatial_variance(uni, g)[0] - 2 * (g * g - 1) / 12) <= 1e-12
    two = np.zeros((1, g * g))
    two[0, [0, 1]] = 0.5
    assert abs(M.spatial_variance(two, g)[0] - 0.25) <= 1e-12


def test_jaccard_examples():
    assert M.jaccard({1, 2}, {2, 3}) == pytest.approx(1 / 3, abs=1e-15)
    assert M.jaccard({1}, {2}) == 0.0
    assert M.jaccard(set(), set()) == 1.0
    same = np.array([[0, 1, 1, 0]] * 3)
    assert M.jaccard_stability(same, 1) == 1.0
    disjoint = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    assert M.jaccard_stability(disjoint, 1) == 0.0


def test_jaccard_stability_matches_pairwise_sets():
    asg = Rng(4).integers(0, 3, (7, 10))
    for slot in range(3):
        sets = [set(np.flatnonzero(a == slot)) for a in asg]
        ref = np.mean([M.jaccard(a, b) for a, b in itertools.combinations(sets, 2)])
        assert abs(M.jaccard_stability(asg, slot) - ref) <= 1e-12


def test_miou_dice_examples():
    m = np.array([1, 1, 0, 0], bool)
    assert M.miou_dice(m, m) == (1.0, 1.0)
    assert M.miou_dice(m, ~m) == (0.0, 0.0)
    assert M.miou_dice([1, 1, 0], [0, 1, 1]) == (pytest.approx(1 / 3), 0.5)
    with pytest.raises(ValueError):
        M.miou_dice([1, 0], [1, 0, 0])


def test_dice_iou_identity_exhaustive():
    for n in range(1, 7):
        masks = list(itertools.product([0, 1], repeat=n))
        for a in masks:
            for b in masks:
                iou, dice = M.miou_dice(a, b)
                assert abs(dice - 2 * iou / (1 + iou)) <= 1e-12


def test_slot_cosine():
    assert M.slot_cosine_similarity(np.tile([1.0, 2.0], (3, 1))) == pytest.approx(1.0)
    assert M.slot_cosine_similarity(np.eye(3)) == 0.0


def test_contralateral_mass():
    g = 4
    attn = np.zeros((2, g * g))
    attn[0, 5] = 1.0          # slot 0 sits on patch (col 1, row 1)
    attn[1, 15] = 1.0         # slot 1 in the far corner
    assert M.contralateral_mass([1.0, 0.0], attn, (1, 1), g) == 1.0
    assert M.contralateral_mass([0.0, 1.0], attn, (1, 1), g) == 0.0
    assert M.contralateral_mass([0.5, 0.5], attn, (0.9, 1.2), g) == 0.5


def test_metric_record_registry():
    M.MetricRecord("rho", 0.5, 0, "abc")
    with pytest.raises(ValueError):
        M.MetricRecord("bogus", 0.5, 0, "abc")
    with pytest.raises(ValueError):
        M.MetricRecord("auc", float("nan"), 0, "abc")


# ---------------------------------------------------------------------------
# classification


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert M.macro_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert M.macro_auc([0.1, 0.2, 0.3, 0.9], [0, 0, 1, 1]) == 1.0
    assert M.macro_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=25))
def test_auc_matches_pair_counting(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [int(y) for _, y in pairs]
    if 0 < sum(labels) < len(labels):
        assert abs(M.macro_auc(scores, labels) - auc_pairs(scores, labels)) <= 1e-12


def test_per_class_auc_skips_degenerate_classes():
    s = np.array([[0.1, 0.2], [0.9, 0.3], [0.2, 0.8]])
    y = np.array([[0, 1], [1, 1], [0, 1]])
    assert M.per_class_auc(s, y) == [1.0, None]
    assert M.macro_auc(s, y) == 1.0
    with pytest.raises(ValueError):
        M.macro_auc(s, np.ones((3, 2)))


def test_macro_f1_examples():
    y = np.array([[1, 0], [0, 1], [1, 1]])
    assert M.macro_f1(np.where(y == 1, 5.0, -5.0), y) == 1.0
    # class 0 never predicted -> its F1 is 0
    assert M.macro_f1(np.array([[-5.0], [-5.0]]), np.array([[1], [0]])) == 0.0
    # TP=1, FP=1, FN=1
    z = np.array([[5.0], [5.0], [-5.0]])
    assert M.macro_f1(z, np.array([[1], [0], [1]])) == 0.5
    # threshold is sigmoid >= 0.5, i.e. logit >= 0
    assert M.macro_f1(np.array([[0.0]]), np.array([[1]])) == 1.0


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_separable_groups():
    r = Rng(5)
    x = np.concatenate([r.normal((20, 2), 0.1), r.normal((20, 2), 0.1) + 10])
    labels, _ = M.kmeans(x, 2, Rng(6))
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1
    assert labels[0] != labels[-1]


def test_kmeans_k_equals_n():
    x = Rng(7).normal((6, 3))
    labels, inertia = M.kmeans(x, 6, Rng(8))
    assert sorted(labels) == list(range(6)) and inertia == 0.0


def test_kmeans_deterministic_and_validated():
    x = Rng(9).normal((30, 2))
    a, ia = M.kmeans(x, 3, Rng(10))
    b, ib = M.kmeans(x, 3, Rng(10))
    assert np.array_equal(a, b) and ia == ib
    with pytest.raises(ValueError):
        M.kmeans(x[:2], 3, Rng(0))


def test_kmeans_inertia_matches_assignment():
    x = Rng(11).normal((40, 3))
    labels, inertia = M.kmeans(x, 4, Rng(12))
    ref = sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in range(4))
    assert inertia == pytest.approx(ref, rel=1e-9)


def test_best_cluster_overlap():
    gt = np.array([0, 1, 1, 0, 0], bool)
    iou, dice, j = M.best_cluster_overlap([2, 1, 1, 0, 2], gt, 3)
    assert (iou, dice, j) == (1.0, 1.0, 1)
