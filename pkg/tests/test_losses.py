import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from mstwins import functional as F
from mstwins.config import LossConfig
from mstwins.gradcheck import check_gradients
from mstwins.losses import (LevelPredictions, balance_loss, cascade_error_masks, combined_loss, contrastive_loss,
                            dice_score, downsample_labels, level_predictions, loss_terms)
from mstwins.tensor import Tensor


def cross_entropy_oracle(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean multi-class cross-entropy, computed directly from logits."""
    lse = logsumexp(logits, axis=1)
    picked = np.take_along_axis(logits, labels[:, None], axis=1)[:, 0]
    return float(np.mean(lse - picked))


def probs_of(logits):
    return F.softmax(Tensor(logits), axis=1)


# -- dice ------------------------------------------------------------------------

def test_dice_identical():
    m = np.array([[0, 1], [1, 2]])
    assert dice_score(m, m, 1) == 1.0


def test_dice_disjoint():
    assert dice_score(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 1) == 0.0


def test_dice_half_overlap():
    # |X| = 2, |Y| = 2, |X∩Y| = 1
    assert dice_score(np.array([1, 1, 0, 0]), np.array([0, 1, 1, 0]), 1) == 0.5


def test_dice_both_empty_is_one():
    assert dice_score(np.zeros(4, int), np.zeros(4, int), 3) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_score(np.zeros(4, int), np.zeros(5, int), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_symmetric_and_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, 3, size=30), r.integers(0, 3, size=30)
    perm = r.permutation(30)
    for k in range(3):
        assert dice_score(a, b, k) == dice_score(b, a, k) == dice_score(a[perm], b[perm], k)


# -- contrastive -----------------------------------------------------------------

def brute_force_contrastive(p: np.ndarray, eps: float, reduce=min) -> float:
    """Per sample: reduce over every unordered pair of the soft Dice; then batch mean."""
    vals = []
    for b in range(p.shape[0]):
        pair_d = []
        for i, j in itertools.combinations(range(p.shape[1]), 2):
            x, y = p[b, i].ravel(), p[b, j].ravel()
            pair_d.append(2.0 * float((x * y).sum()) / (float(x.sum()) + float(y.sum()) + eps))
        vals.append(reduce(pair_d))
    return float(np.mean(vals))


def test_contrastive_toy_grid_matches_enumeration():
    p = np.array([[
        [[0.7, 0.1], [0.2, 0.3]],
        [[0.2, 0.6], [0.1, 0.3]],
        [[0.1, 0.3], [0.7, 0.4]],
    ]])
    cfg = LossConfig()
    got = contrastive_loss([Tensor(p)], cfg).item()
    assert got == pytest.approx(brute_force_contrastive(p, cfg.epsilon), abs=1e-15)
    got_max = contrastive_loss([Tensor(p)], LossConfig(pair_reduce="max")).item()
    assert got_max == pytest.approx(brute_force_contrastive(p, cfg.epsilon, max), abs=1e-15)


def test_contrastive_one_hot_separated_is_zero():
    lab = np.array([[0, 1], [2, 1]])
    p = F.one_hot(lab[None], 3, axis=1)
    assert 0.0 <= contrastive_loss([Tensor(p)]).item() <= 1e-6


def test_contrastive_identical_pair_reaches_one():
    # classes 0 and 1 share one region with equal maps, class 2 owns the rest
    p = np.zeros((1, 3, 2, 4))
    p[0, 0, :, :2] = p[0, 1, :, :2] = 0.5
    p[0, 2, :, 2:] = 1.0
    val = contrastive_loss([Tensor(p)], LossConfig(pair_reduce="max", dice_square=True)).item()
    assert val == pytest.approx(1.0, abs=1e-6)
    # the min-over-pairs reading picks a separated pair instead
    assert contrastive_loss([Tensor(p)], LossConfig()).item() == 0.0


def test_contrastive_sums_over_levels():
    r = np.random.default_rng(0)
    ps = [probs_of(r.normal(size=(2, 3, 4 >> j, 4 >> j))) for j in range(3)]
    total = contrastive_loss(ps).item()
    assert total == pytest.approx(sum(contrastive_loss([p]).item() for p in ps), abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["min", "max"]))
def test_contrastive_bounded_by_level_count(seed, mode):
    r = np.random.default_rng(seed)
    ps = [probs_of(r.normal(scale=3.0, size=(2, 4, 8 >> j, 8 >> j))) for j in range(4)]
    val = contrastive_loss(ps, LossConfig(pair_reduce=mode)).item()
    assert 0.0 <= val <= 4.0 + 1e-6


def test_contrastive_needs_two_classes():
    with pytest.raises(ValueError):
        contrastive_loss([Tensor(np.ones((1, 1, 2, 2)))])


# -- balance ---------------------------------------------------------------------

def test_balance_q0_half_probability():
    p = Tensor(np.array([0.5, 0.5]).reshape(1, 2, 1, 1))
    val = balance_loss([p], [np.zeros((1, 1, 1), int)], [np.ones((1, 1, 1), bool)], q=[0.0, 0.0]).item()
    assert val == pytest.approx(0.6931471805599453, abs=1e-15)


@pytest.mark.parametrize("q", [0.0, 1.0, 2.0, 5.0])
def test_balance_perfect_prediction_is_zero(q):
    lab = np.array([[[0, 1], [2, 2]]])
    p = F.one_hot(lab, 3, axis=1)
    assert balance_loss([Tensor(p)], [lab], [np.ones_like(lab, bool)], q=[q] * 3).item() == 0.0


def test_balance_q2_smaller_than_q0():
    r = np.random.default_rng(1)
    p = probs_of(r.normal(size=(2, 3, 4, 4)))
    lab = r.integers(0, 3, size=(2, 4, 4))
    m = np.ones_like(lab, bool)
    assert balance_loss([p], [lab], [m], [2.0] * 3).item() < balance_loss([p], [lab], [m], [0.0] * 3).item()


@pytest.mark.parametrize("seed", range(5))
def test_balance_q0_full_masks_is_cross_entropy(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(scale=2.0, size=(3, 5, 6, 6))
    lab = r.integers(0, 5, size=(3, 6, 6))
    got = balance_loss([probs_of(logits)], [lab], [np.ones_like(lab, bool)], [0.0] * 5).item()
    assert abs(got - cross_entropy_oracle(logits, lab)) <= 1e-12


def test_balance_error_mask_restricts_average():
    p = Tensor(np.array([[0.9, 0.4], [0.1, 0.6]]).reshape(1, 2, 1, 2))
    lab = np.array([[[0, 0]]])
    only_second = balance_loss([p], [lab], [np.array([[[False, True]]])], [0.0, 0.0]).item()
    assert only_second == pytest.approx(-np.log(0.4), abs=1e-15)


def test_balance_empty_mask_contributes_zero():
    p = probs_of(np.random.default_rng(2).normal(size=(1, 3, 2, 2)))
    lab = np.zeros((1, 2, 2), int)
    assert balance_loss([p], [lab], [np.zeros((1, 2, 2), bool)], [2.0] * 3).item() == 0.0


def test_balance_per_class_exponent():
    p = Tensor(np.array([0.3, 0.7, 0.8, 0.2]).reshape(1, 2, 1, 2))
    lab = np.array([[[0, 1]]])
    val = balance_loss([p], [lab], [np.ones((1, 1, 2), bool)], q=[1.0, 3.0]).item()
    ref = 0.5 * (-(0.7 ** 1) * np.log(0.3) - (0.8 ** 3) * np.log(0.2))
    assert val == pytest.approx(ref, abs=1e-15)


def test_balance_rejects_invalid_probabilities():
    p = Tensor(np.array([1.5, -0.5]).reshape(1, 2, 1, 1))
    with pytest.raises(ValueError):
        balance_loss([p], [np.zeros((1, 1, 1), int)], [np.ones((1, 1, 1), bool)], [0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 4.0))
def test_balance_non_negative(seed, q):
    r = np.random.default_rng(seed)
    p = probs_of(r.normal(scale=4.0, size=(1, 3, 4, 4)))
    lab = r.integers(0, 3, size=(1, 4, 4))
    assert balance_loss([p], [lab], [r.random((1, 4, 4)) < 0.5], [q] * 3).item() >= 0.0


# -- cascade masks and level bookkeeping -----------------------------------------

def test_cascade_masks_mark_coarse_errors():
    deep = np.zeros((1, 2, 1, 2))
    deep[0, 1, 0, 0] = 5.0  # coarse predicts class 1 on the left half, class 0 on the right
    fine = np.zeros((1, 2, 2, 4))
    lab_fine = np.array([[[1, 1, 1, 0], [0, 1, 0, 0]]])
    labels = [lab_fine, downsample_labels(lab_fine, 2)]
    masks = cascade_error_masks([Tensor(fine), Tensor(deep)], labels)
    assert masks[1].all()
    np.testing.assert_array_equal(masks[0], [[[False, False, True, False], [True, False, False, False]]])


def test_cascade_masks_can_add_own_errors():
    deep = np.zeros((1, 2, 1, 2))
    deep[0, 1, 0, 0] = 5.0
    fine = np.zeros((1, 2, 2, 4))
    fine[0, 1, 0, 3] = 5.0  # the fine level alone gets pixel (0, 3) wrong
    fine[0, 1, 1, 0] = 5.0  # and pixel (1, 0) is wrong at both levels
    lab_fine = np.array([[[1, 1, 1, 0], [0, 1, 0, 0]]])
    labels = [lab_fine, downsample_labels(lab_fine, 2)]
    lits = [Tensor(fine), Tensor(deep)]
    plain = cascade_error_masks(lits, labels)
    both = cascade_error_masks(lits, labels, include_self=True)
    assert both[1].all()
    own = fine.argmax(axis=1) != lab_fine
    np.testing.assert_array_equal(both[0], plain[0] | own)
    assert both[0][0, 0, 3] and not plain[0][0, 0, 3]


def test_level_predictions_probabilities_sum_to_one():
    r = np.random.default_rng(3)
    logits = [Tensor(r.normal(size=(2, 4, 16 >> j, 16 >> j))) for j in range(4)]
    preds = level_predictions(logits, [4, 8, 16, 32], r.integers(0, 4, size=(2, 64, 64)))
    for p, y in zip(preds.probs, preds.labels):
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-10)
        assert y.shape == (2,) + p.shape[2:]


def test_downsample_labels_nearest():
    m = np.arange(16).reshape(1, 4, 4)
    np.testing.assert_array_equal(downsample_labels(m, 2), [[[5, 7], [13, 15]]])


# -- combined --------------------------------------------------------------------

def toy(seed=0, K=3, levels=2):
    r = np.random.default_rng(seed)
    logits = [Tensor(r.normal(size=(2, K, 4 >> j, 4 >> j))) for j in range(levels)]
    return logits, level_predictions(logits, [1 << j for j in range(levels)], r.integers(0, K, size=(2, 4, 4)))


def test_alpha_zero_equals_balance_bitwise():
    _, preds = toy()
    cfg = LossConfig(alpha=0.0)
    bal = balance_loss(preds.probs, preds.labels, preds.error_masks, cfg.q_per_class(3))
    assert combined_loss(preds, cfg).item() == bal.item()


def test_alpha_one_is_sum_of_terms_bitwise():
    _, preds = toy(1)
    cfg = LossConfig(alpha=1.0)
    con = contrastive_loss(preds.probs, cfg).item()
    bal = balance_loss(preds.probs, preds.labels, preds.error_masks, cfg.q_per_class(3)).item()
    assert combined_loss(preds, cfg).item() == con + bal


def test_alpha_scales_only_contrastive():
    _, preds = toy(2)
    a = 0.7
    l1 = combined_loss(preds, LossConfig(alpha=a)).item()
    l2 = combined_loss(preds, LossConfig(alpha=2 * a)).item()
    con = contrastive_loss(preds.probs).item()
    assert l2 - l1 == pytest.approx(a * con, abs=1e-14)


def test_loss_terms_consistent():
    _, preds = toy(3)
    total, con, bal = loss_terms(preds, LossConfig(alpha=0.5))
    assert total.item() == pytest.approx(0.5 * con.item() + bal.item(), abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_combined_gradient_wrt_logits_4x4_three_classes(seed):
    r = np.random.default_rng(seed)
    logits = Tensor(r.normal(size=(1, 3, 4, 4)))
    lab = r.integers(0, 3, size=(1, 4, 4))

    def loss():
        probs = [F.softmax(logits, axis=1)]
        return combined_loss(LevelPredictions(probs, [lab], [np.ones_like(lab, bool)]), LossConfig(alpha=1.0))

    assert check_gradients(loss, [logits]) < 1e-5


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        LossConfig(q=-0.5)
    with pytest.raises(ValueError):
        LossConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        LossConfig(pair_reduce="mean")
    with pytest.raises(ValueError):
        LossConfig(q=(1.0, 2.0)).q_per_class(3)
