"""Local and centralized baselines trained with validation-based early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..data import ClientDataset, Volume, _rng
from ..model import UNet, UNetConfig
from ..nn import AdamState, ParamSet
from ..training import mean_dice, train_epochs
from .selection import global_validation_score

log = logging.getLogger(__name__)


class EarlyStopping:
    """Track the best epoch; stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad = 0

    def update(self, score: float) -> bool:
        """Record one epoch's score; True when this epoch is the new best."""
        self.epoch += 1
        if score > self.best_score:
            self.best_score, self.best_epoch, self.bad = score, self.epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


@dataclass
class BaselineResult:
    name: str
    model: UNet
    best_epoch: int
    best_val: float
    epochs_run: int
    val_history: list[float] = field(default_factory=list)


def fit_early_stopping(model: UNet, train: Sequence[Volume], validate: Callable[[UNet], float],
                       epochs: int, patience: int, batch_size: int, lr: float,
                       rng: np.random.Generator, name: str = "") -> BaselineResult:
    """Train up to ``epochs`` epochs and restore the best-validation weights."""
    x = np.concatenate([v.slices for v in train])[:, None]
    y = np.concatenate([v.masks for v in train])
    mods = [v.modality for v in train for _ in range(len(v))]
    opt = AdamState(lr=lr)
    stopper = EarlyStopping(patience)
    best: ParamSet = model.state_dict()
    history = []
    for _ in range(epochs):
        train_epochs(model, x, y, mods, opt, batch_size, 1, rng)
        score = validate(model)
        history.append(score)
        if stopper.update(score):
            best = model.state_dict()
        if stopper.should_stop:
            break
    model.load_state(best)
    log.info("%s: best epoch %d of %d (val %.4f)", name, stopper.best_epoch, stopper.epoch, stopper.best_score)
    return BaselineResult(name, model, stopper.best_epoch, float(stopper.best_score), stopper.epoch, history)


def train_local_baselines(datasets: Sequence[ClientDataset], seed: int, channels: Sequence[int],
                          epochs: int = 50, patience: int = 5, batch_size: int = 12, lr: float = 1e-3,
                          dtype=np.float32) -> dict[str, BaselineResult]:
    """One normalization-free U-Net per client, trained on that client's data only."""
    out = {}
    for k, ds in enumerate(datasets):
        init_seed = int(_rng(seed, 505, k).integers(0, 2**31 - 1))
        model = UNet(UNetConfig(channels=list(channels), norm="none"), seed=init_seed, dtype=dtype)
        out[ds.client_id] = fit_early_stopping(
            model, ds.train, lambda m, ds=ds: mean_dice(m, ds.val), epochs, patience, batch_size, lr,
            _rng(seed, 506, k), name=f"local[{ds.client_id}]")
    return out


def centralized_modes(datasets_or_mixes: Sequence) -> int:
    """M = 4 for CT-only + MRI-only federations, M = 2 once a mixed client is present."""
    mixes = [getattr(d, "modality_mix", d) for d in datasets_or_mixes]
    return 2 if "Mixed" in mixes else 4


def train_centralized(datasets: Sequence[ClientDataset], seed: int, channels: Sequence[int],
                      epochs: int = 50, patience: int = 5, batch_size: int = 12, lr: float = 1e-3,
                      modes: int | None = None, dtype=np.float32) -> BaselineResult:
    """One learned-gate ModeNorm U-Net on the union of all training sets.

    Early stopping uses the mean of the per-client validation Dice, the same
    score the federated runs are selected on.
    """
    modes = modes or centralized_modes(datasets)
    model = UNet(UNetConfig(channels=list(channels), norm="mode", modes=modes), seed=seed, dtype=dtype)
    train = [v for ds in datasets for v in ds.train]

    def validate(m):
        return global_validation_score([mean_dice(m, ds.val) for ds in datasets])

    return fit_early_stopping(model, train, validate, epochs, patience, batch_size, lr,
                              _rng(seed, 507), name=f"centralized[M={modes}]")
