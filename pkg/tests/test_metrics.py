import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special, stats

from fedseg.metrics import (
    PatientScore, bce_loss, betainc, dice_coefficient, dice_loss, dice_per_patient, relative_improvement,
    t_test_unpaired, total_loss,
)
from fedseg.tensor import ShapeError, Tensor


def _pair(seed, shape=(8, 8)):
    rng = np.random.default_rng(seed)
    return rng.random(shape), (rng.random(shape) > 0.5).astype(np.float64)


# ---- losses ------------------------------------------------------------------

def test_dice_loss_perfect_and_disjoint():
    y = np.zeros((8, 8))
    y[:4] = 1
    assert float(dice_loss(Tensor(y.copy()), y).data) < 1e-5
    assert abs(float(dice_loss(Tensor(1 - y), y).data) - 1) < 1e-6


def test_dice_loss_formula_oracle():
    p, y = _pair(0)
    ref = 1 - (2 * (p * y).sum() + 1e-6) / (p.sum() + y.sum() + 1e-6)
    assert abs(float(dice_loss(Tensor(p), y).data) - ref) < 1e-12


def test_bce_values():
    y = (np.arange(16).reshape(4, 4) % 2).astype(float)
    assert abs(float(bce_loss(Tensor(np.full((4, 4), 0.5)), y).data) - math.log(2)) < 1e-12
    assert float(bce_loss(Tensor(y.copy()), y).data) <= -math.log(1 - 1e-7) + 1e-12
    p, y = _pair(1)
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(float(bce_loss(Tensor(p), y).data) - ref) < 1e-12


def test_total_is_sum_of_parts_including_gradient():
    p, y = _pair(2)
    parts = []
    for fn in (dice_loss, bce_loss):
        t = Tensor(p.copy(), requires_grad=True)
        out = fn(t, y)
        out.backward()
        parts.append((float(out.data), t.grad))
    t = Tensor(p.copy(), requires_grad=True)
    total = total_loss(t, y)
    total.backward()
    assert float(total.data) == parts[0][0] + parts[1][0]
    assert np.abs(t.grad - parts[0][1] - parts[1][1]).max() < 1e-10
    assert float(total_loss(Tensor(y.copy()), y).data) < 1e-5


def test_loss_gradients_match_finite_differences():
    from fedseg.tensor import finite_diff_grad
    p, y = _pair(3, (4, 4))
    p = 0.05 + 0.9 * p
    for fn in (dice_loss, bce_loss):
        t = Tensor(p.copy(), requires_grad=True)
        fn(t, y).backward()
        num = finite_diff_grad(lambda a: float(fn(Tensor(a), y).data), p)
        assert np.abs(t.grad - num).max() / np.abs(num).max() < 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.zeros((2, 2))), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(0, 1)), arrays(np.bool_, (3, 3)))
def test_total_loss_non_negative(p, y):
    assert float(total_loss(Tensor(p), y.astype(float)).data) >= 0


# ---- dice --------------------------------------------------------------------

def test_dice_coefficient_examples():
    a = np.zeros(10, bool)
    b = np.zeros(10, bool)
    a[:4] = True
    b[1:7] = True
    assert dice_coefficient(a, b) == 0.6
    assert dice_coefficient(a, a) == 1.0
    assert dice_coefficient(a, ~a) == 0.0
    assert dice_coefficient(np.zeros(3), np.zeros(3)) == 1.0
    with pytest.raises(ShapeError):
        dice_coefficient(np.zeros(3), np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, (4, 5)), arrays(np.bool_, (4, 5)))
def test_dice_symmetric_and_bounded(a, b):
    d = dice_coefficient(a, b)
    assert d == dice_coefficient(b, a)
    assert 0.0 <= d <= 1.0


def test_dice_per_patient_examples():
    gt = [np.zeros((4, 4), bool), np.zeros((4, 4), bool)]
    gt[0][:2] = True
    gt[1][2:] = True
    assert dice_per_patient(gt, gt) == 1.0
    half = [gt[0], np.zeros((4, 4), bool)]
    assert abs(dice_per_patient(half, gt) - 2 / 3) < 1e-15
    with pytest.raises(ValueError):
        dice_per_patient(gt[:1], gt)


@settings(max_examples=30, deadline=None)
@given(arrays(np.bool_, (3, 4, 4)), arrays(np.bool_, (3, 4, 4)))
def test_dice_per_patient_equals_flattened_dice(pred, gt):
    assert dice_per_patient(list(pred), list(gt)) == dice_coefficient(pred.ravel(), gt.ravel())


def test_patient_score_range():
    PatientScore("p", "c", 0.5)
    with pytest.raises(ValueError):
        PatientScore("p", "c", 1.5)


# ---- relative improvement ----------------------------------------------------

def test_relative_improvement_examples():
    assert relative_improvement(0.8, 0.9) == pytest.approx(12.5)
    assert relative_improvement(0.7, 0.7) == 0.0
    assert relative_improvement(0.5, 0.4) == pytest.approx(-20.0)
    with pytest.raises(ValueError):
        relative_improvement(0.0, 0.5)


# ---- t-test ------------------------------------------------------------------

def fixed_sample_pairs():
    """Ten deterministic sample pairs with varied sizes and separations."""
    rng = np.random.default_rng(2024)
    pairs = [([2.1, 2.5, 2.3, 2.8], [1.1, 1.4, 1.2, 1.5])]
    for k in range(9):
        na, nb = 3 + k % 4, 2 + (k * 3) % 7
        a = rng.normal(0.8, 0.05 + 0.02 * k, na)
        b = rng.normal(0.8 + 0.01 * (k - 4), 0.05, nb)
        pairs.append((a.tolist(), b.tolist()))
    return pairs


@pytest.mark.parametrize("idx", range(10))
def test_t_test_matches_reference_oracle(idx):
    a, b = fixed_sample_pairs()[idx]
    t, p = t_test_unpaired(a, b)
    ref = stats.ttest_ind(a, b, equal_var=True)
    assert abs(t - ref.statistic) < 1e-6 and abs(p - ref.pvalue) < 1e-6


@pytest.mark.parametrize("idx", [0, 3, 7])
def test_welch_matches_reference_oracle(idx):
    a, b = fixed_sample_pairs()[idx]
    t, p = t_test_unpaired(a, b, equal_var=False)
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert abs(t - ref.statistic) < 1e-6 and abs(p - ref.pvalue) < 1e-6


def test_t_test_degenerate_cases():
    assert t_test_unpaired([1, 2, 3, 4], [1, 2, 3, 4]) == (0.0, 1.0)
    assert t_test_unpaired([0.5, 0.5], [0.5, 0.5]) == (0.0, 1.0)
    with pytest.raises(ZeroDivisionError):
        t_test_unpaired([0.5, 0.5], [0.7, 0.7])
    with pytest.raises(ValueError):
        t_test_unpaired([0.5], [0.5, 0.6])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.lists(st.floats(0, 1), min_size=2, max_size=8))
def test_t_test_swap_symmetry(a, b):
    try:
        t1, p1 = t_test_unpaired(a, b)
        t2, p2 = t_test_unpaired(b, a)
    except ZeroDivisionError:
        return
    assert t1 == pytest.approx(-t2, abs=1e-12)
    assert p1 == pytest.approx(p2, abs=1e-12)
    assert 0.0 <= p1 <= 1.0


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 0.5, 0.9), (9.0, 0.5, 0.1), (30.0, 0.5, 0.97), (1.0, 1.0, 0.5)])
def test_betainc_matches_reference(a, b, x):
    assert abs(betainc(a, b, x) - special.betainc(a, b, x)) < 1e-12
