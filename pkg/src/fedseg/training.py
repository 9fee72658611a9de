"""Mini-batch training and evaluation loops shared by clients and baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import ClientDataset, Volume, _rng
from .metrics import dice_per_patient, total_loss
from .model import UNet, predict_masks
from .nn import AdamState, adam_step
from .tensor import no_grad


@dataclass
class EpochResult:
    steps: int
    mean_loss: float


def train_step(model: UNet, x: np.ndarray, y: np.ndarray, modalities: Sequence, opt: AdamState) -> float:
    model.zero_grad()
    p = model.forward(x, list(modalities), training=True)
    loss = total_loss(p, y[:, None].astype(model.dtype))
    loss.backward()
    adam_step(model.params, model.grads(), opt)
    return float(loss.data)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled pass; the last batch may be short."""
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def fixed_batches(n: int, batch_size: int, steps: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Exactly ``steps`` full batches drawn from a stream of reshuffled passes."""
    stream: list[int] = []
    for _ in range(steps):
        while len(stream) < batch_size:
            stream.extend(rng.permutation(n).tolist())
        batch, stream = stream[:batch_size], stream[batch_size:]
        yield np.asarray(batch)


def train_epochs(model: UNet, x: np.ndarray, y: np.ndarray, modalities: Sequence, opt: AdamState,
                 batch_size: int, epochs: int, rng: np.random.Generator) -> EpochResult:
    losses = []
    for _ in range(epochs):
        for idx in epoch_batches(len(x), batch_size, rng):
            losses.append(train_step(model, x[idx], y[idx], [modalities[i] for i in idx], opt))
    return EpochResult(len(losses), float(np.mean(losses)) if losses else float("nan"))


def train_fixed_steps(model: UNet, x: np.ndarray, y: np.ndarray, modalities: Sequence, opt: AdamState,
                      batch_size: int, steps: int, rng: np.random.Generator) -> EpochResult:
    losses = [train_step(model, x[idx], y[idx], [modalities[i] for i in idx], opt)
              for idx in fixed_batches(len(x), batch_size, steps, rng)]
    return EpochResult(len(losses), float(np.mean(losses)) if losses else float("nan"))


def volume_dice(model: UNet, volumes: Sequence[Volume]) -> list[float]:
    """Dice per patient for each volume, evaluated with the model's current state."""
    if not volumes:
        return []
    x = np.concatenate([v.slices for v in volumes])[:, None]
    mods = [v.modality for v in volumes for _ in range(len(v))]
    masks = predict_masks(model, x, mods)
    out, start = [], 0
    for v in volumes:
        out.append(dice_per_patient(masks[start:start + len(v)], v.masks))
        start += len(v)
    return out


def mean_dice(model: UNet, volumes: Sequence[Volume]) -> float:
    scores = volume_dice(model, volumes)
    return float(np.mean(scores)) if scores else float("nan")


def loss_on(model: UNet, dataset: ClientDataset, split: str = "train") -> float:
    """Eval-mode total loss over a split (no parameter or statistic updates)."""
    x, y, mods = dataset.arrays(split)
    with no_grad():
        p = model.forward(x.astype(model.dtype), mods, training=False)
        return float(total_loss(p, y[:, None].astype(model.dtype)).data)


def client_rng(master_seed: int, client_index: int, round_: int) -> np.random.Generator:
    return _rng(master_seed, 404, client_index, round_)
