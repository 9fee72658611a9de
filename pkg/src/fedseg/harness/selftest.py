"""Fast invariant and oracle checks that run without pytest (``fedseg selftest``)."""
from __future__ import annotations

import tempfile
import traceback
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor as T
from ..federation import RoundUpdate, aggregate_fedavg, interpolate
from ..metrics import dice_coefficient, dice_per_patient, t_test_unpaired
from ..nn import NORM_PARAM, OTHER, BatchNorm2d, ModeNorm2d, ParamSet, batchnorm2d, hard_gates, modenorm2d
from .checkpoint import load_checkpoint, save_checkpoint
from .selection import select_winner


def _check_conv_gradient() -> None:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    xt = T.Tensor(x, requires_grad=True)
    T.sum(T.conv2d(xt, T.Tensor(w), T.Tensor(b))).backward()
    num = T.finite_diff_grad(lambda a: float(T.conv2d(T.Tensor(a), T.Tensor(w), T.Tensor(b)).data.sum()), x)
    err = np.abs(xt.grad - num).max() / max(np.abs(num).max(), 1e-12)
    assert err < 1e-6, f"conv2d input gradient relative error {err:.2e}"


def _check_modenorm_reductions() -> None:
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.normal(size=(4, 3, 4, 4)))
    bn = BatchNorm2d("bn", 3)
    mn = ModeNorm2d("mn", 3, 1, "learned")
    out_bn = batchnorm2d(x, bn, training=True).data
    out_mn = modenorm2d(x, mn, T.Tensor(np.ones((4, 1))), training=True).data
    assert np.abs(out_bn - out_mn).max() < 1e-6, "ModeNorm with one mode differs from BatchNorm"

    hard = ModeNorm2d("hard", 3, 2, "hard")
    mods = ["CT", "MRI", "CT", "MRI"]
    out = modenorm2d(x, hard, hard_gates(mods), training=True).data
    for idx in ([0, 2], [1, 3]):
        ref = batchnorm2d(T.Tensor(x.data[idx]), BatchNorm2d("ref", 3), training=True).data
        assert np.abs(out[idx] - ref).max() < 1e-6, "hard-gated ModeNorm differs from per-modality BatchNorm"


def _check_aggregation() -> None:
    def ps(a, b):
        return ParamSet([("w", np.array([a]), OTHER), ("n", np.array([b]), NORM_PARAM)])

    ups = [RoundUpdate("a", ps(1.0, 2.0), 10, 0.0, 0.0), RoundUpdate("b", ps(4.0, -1.0), 30, 0.0, 0.0)]
    avg = aggregate_fedavg(ups)
    assert abs(avg["w"][0] - 3.25) < 1e-12 and abs(avg["n"][0] - (-0.25)) < 1e-12, "FedAvg weighted mean"
    mixed = interpolate(ps(1.0, 1.0), ps(3.0, 5.0), 0.25)
    assert abs(mixed["w"][0] - 1.5) < 1e-12 and abs(mixed["n"][0] - 2.0) < 1e-12, "interpolation"


def _check_checkpoint() -> None:
    rng = np.random.default_rng(2)
    params = ParamSet([("a.weight", rng.normal(size=(2, 3)).astype(np.float32), OTHER),
                       ("a.alpha", rng.normal(size=(2, 4)), NORM_PARAM)])
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(params, Path(tmp) / "x.fseg")
        assert load_checkpoint(path, params).equals(params), "checkpoint round trip is not bitwise"


def _check_metrics() -> None:
    rng = np.random.default_rng(3)
    pred = rng.random((4, 6, 6)) > 0.5
    gt = rng.random((4, 6, 6)) > 0.4
    assert dice_per_patient(list(pred), list(gt)) == dice_coefficient(pred.ravel(), gt.ravel())
    t, p = t_test_unpaired([2.1, 2.5, 2.3, 2.8], [1.1, 1.4, 1.2, 1.5])
    # reference values from an independent statistics package
    assert abs(t - 6.428571428571429) < 1e-6 and abs(p - 0.0006695813825645997) < 1e-6, "t-test oracle"


def _check_winner() -> None:
    assert select_winner([(1, 0.5), (2, 0.9), (3, 0.7)]) == (2, 0.9)
    assert select_winner([(1, 0.9), (2, 0.9)]) == (1, 0.9)


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("conv2d gradient vs finite differences", _check_conv_gradient),
    ("mode normalization reductions", _check_modenorm_reductions),
    ("aggregation oracles", _check_aggregation),
    ("checkpoint round trip", _check_checkpoint),
    ("dice and t-test oracles", _check_metrics),
    ("winner selection", _check_winner),
]


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
            status = "PASS"
        except Exception:  # report and keep going
            ok = False
            status = "FAIL"
            if verbose:
                traceback.print_exc()
        if verbose:
            print(f"{status}  {name}")
    return ok
