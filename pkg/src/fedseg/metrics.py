"""Segmentation losses and evaluation statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DICE_SMOOTH = 1e-6
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class PatientScore:
    patient_id: str
    client_id: str
    dice: float

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice must lie in [0, 1], got {self.dice}")


def _target(p: Tensor, y) -> np.ndarray:
    y = np.asarray(y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"prediction {p.shape} and target {y.shape} shapes differ")
    return y


def dice_loss(p: Tensor, y, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss 1 - (2 sum(p*y) + s) / (sum(p) + sum(y) + s) on probabilities."""
    y = _target(p, y)
    inter = float((p.data * y).sum())
    denom = float(p.data.sum()) + float(y.sum()) + smooth
    num = 2 * inter + smooth
    value = np.asarray(1.0 - num / denom, dtype=p.dtype)

    def _bw(g):
        return (g * -(2 * y * denom - num) / denom ** 2,)

    return Tensor._make(value, (p,), _bw, "dice_loss")


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = _target(p, y)
    pc = T.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    yt = Tensor(y)
    ll = T.mul(yt, T.log(pc)) + T.mul(Tensor(1 - y), T.log(1.0 - pc))
    return -T.mean(ll)


def total_loss(p: Tensor, y) -> Tensor:
    return dice_loss(p, y) + bce_loss(p, y)


def dice_coefficient(pred, target) -> float:
    """2|A and B| / (|A| + |B|) on binary masks; two empty masks score 1.0."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(target).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dice_per_patient(pred_slices: Sequence, gt_slices: Sequence) -> float:
    """Dice over the whole stacked volume of one patient."""
    if len(pred_slices) != len(gt_slices):
        raise ValueError(f"slice count mismatch: {len(pred_slices)} predicted vs {len(gt_slices)} ground truth")
    return dice_coefficient(np.stack([np.asarray(s) for s in pred_slices]),
                            np.stack([np.asarray(s) for s in gt_slices]))


def relative_improvement(x1: float, x2: float) -> float:
    """Improvement of ``x2`` over ``x1`` in percent."""
    if x1 <= 0:
        raise ValueError(f"relative improvement needs a positive baseline, got {x1}")
    return (x2 - x1) / x1 * 100.0


# ---- Student t distribution -------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_test_unpaired(a: Sequence[float], b: Sequence[float], equal_var: bool = True) -> tuple[float, float]:
    """Two-sided unpaired t-test; pooled variance by default, Welch with ``equal_var=False``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if equal_var:
        df = na + nb - 2.0
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    else:
        se = math.sqrt(va / na + vb / nb)
        if se > 0:
            df = (va / na + vb / nb) ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    if se == 0:
        if ma == mb:
            return 0.0, 1.0
        raise ZeroDivisionError("zero variance in both samples with different means")
    t = float((ma - mb) / se)
    return t, t_two_sided_p(t, df)
