"""Reduced U-Net for 2D liver masks with pluggable normalization."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ModeNorm2d, ParamSet, SkeletonError

NORM_KINDS = ("none", "batch", "mode", "hard_mode")


@dataclass
class UNetConfig:
    channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    norm: str = "none"
    modes: int = 2
    in_channels: int = 1
    out_channels: int = 1
    upsample: str = "nearest"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if not self.channels:
            raise ValueError("channels must be non-empty")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORM_KINDS}")
        if self.norm == "hard_mode" and self.modes != 2:
            raise ValueError("hard_mode normalization is fixed to 2 modes")
        if self.upsample != "nearest":
            raise ValueError("only nearest-neighbour upsampling is implemented")
        if self.out_channels != 1:
            raise ValueError("the head produces a single foreground channel")

    @property
    def depth(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


class _Identity:
    def entries(self):
        return iter(())

    def __call__(self, x, modalities=None, training=False):
        return x


class UNet:
    def __init__(self, cfg: UNetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._layers: list = []
        ch = cfg.channels

        def conv(name, cin, cout, k=3):
            layer = Conv2d(name, cin, cout, k, rng, self.dtype)
            self._layers.append(layer)
            return layer

        def norm(name, c):
            if cfg.norm == "none":
                layer = _Identity()
            elif cfg.norm == "batch":
                layer = BatchNorm2d(name, c, dtype=self.dtype)
            elif cfg.norm == "mode":
                layer = ModeNorm2d(name, c, cfg.modes, "learned", rng=rng, dtype=self.dtype)
            else:
                layer = ModeNorm2d(name, c, 2, "hard", dtype=self.dtype)
            self._layers.append(layer)
            return layer

        self.encoder = []
        cin = cfg.in_channels
        for i, c in enumerate(ch):
            self.encoder.append([(conv(f"enc{i}.conv1", cin, c), norm(f"enc{i}.norm1", c)),
                                 (conv(f"enc{i}.conv2", c, c), norm(f"enc{i}.norm2", c))])
            cin = c
        self.decoder = []
        for i in range(len(ch) - 2, -1, -1):
            c = ch[i]
            self.decoder.append({
                "up": (conv(f"dec{i}.upconv", ch[i + 1], c), norm(f"dec{i}.upnorm", c)),
                "block": [(conv(f"dec{i}.conv1", 2 * c, c), norm(f"dec{i}.norm1", c)),
                          (conv(f"dec{i}.conv2", c, c), norm(f"dec{i}.norm2", c))],
            })
        self.head = conv("head", ch[0], cfg.out_channels, k=1)

        self._tensors: dict[str, T.Tensor] = {}
        entries = []
        for layer in self._layers:
            for name, tensor, tag in layer.entries():
                self._tensors[name] = tensor
                entries.append((name, tensor.data, tag))
        self.params = ParamSet(entries)

    # ---- state -------------------------------------------------------------

    def state_dict(self) -> ParamSet:
        return self.params.copy()

    def load_state(self, state: ParamSet, partial: bool = False) -> None:
        """Copy values from ``state`` into the live tensors (matched by name)."""
        for name in state:
            if name not in self.params:
                raise SkeletonError(f"unexpected parameter {name!r}")
            mine, tag = self.params[name], self.params.tag(name)
            other = state.tag(name)
            if state[name].shape != mine.shape or other.kind != tag.kind or other.role != tag.role:
                raise SkeletonError(f"skeleton mismatch at {name!r}")
        if not partial:
            missing = [n for n in self.params if n not in state]
            if missing:
                raise SkeletonError(f"missing parameters: {missing[:3]}")
        for name in state:
            np.copyto(self.params[name], state[name], casting="same_kind")

    def grads(self) -> dict[str, np.ndarray | None]:
        return {n: t.grad for n, t in self._tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def parameter_count(self) -> int:
        """Number of trainable scalars (statistics excluded)."""
        return int(sum(v.size for _, v, tag in self.params.items() if not tag.is_statistic))

    # ---- forward -----------------------------------------------------------

    def forward(self, x, modalities: Sequence | None = None, training: bool = False) -> T.Tensor:
        x = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=self.dtype))
        div = 2 ** (self.cfg.depth - 1)
        if x.data.ndim != 4 or x.shape[2] % div or x.shape[3] % div:
            raise T.ShapeError(f"input spatial dims {x.shape[2:]} must be divisible by {div}")
        if modalities is not None and len(modalities) != x.shape[0]:
            raise ValueError("one modality label per slice is required")

        def unit(pair, h):
            c, nrm = pair
            return T.relu(nrm(c(h), modalities, training))

        skips = []
        h = x
        for i, block in enumerate(self.encoder):
            if i:
                h = T.maxpool2d(h)
            for pair in block:
                h = unit(pair, h)
            skips.append(h)
        for j, stage in enumerate(self.decoder):
            skip = skips[-2 - j]
            h = unit(stage["up"], T.upsample_nearest2x(h))
            h = T.concat_channels([skip, h])
            for pair in stage["block"]:
                h = unit(pair, h)
        return T.sigmoid(self.head(h))

    __call__ = forward


def build_unet(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> tuple[UNet, ParamSet]:
    model = UNet(cfg, seed=seed, dtype=dtype)
    return model, model.state_dict()


def threshold(p: np.ndarray) -> np.ndarray:
    """0 for p in [0, 0.5], 1 for p in (0.5, 1]."""
    return (np.asarray(p) > 0.5).astype(np.uint8)


def predict_probs(model: UNet, slices, modalities: Sequence | None = None, batch_size: int = 32) -> np.ndarray:
    """Eval-mode foreground probabilities [N, H, W] for a [N, 1, H, W] stack."""
    arr = slices.data if isinstance(slices, T.Tensor) else np.asarray(slices)
    arr = arr.astype(model.dtype, copy=False)
    out = []
    with T.no_grad():
        for i in range(0, arr.shape[0], batch_size):
            mods = None if modalities is None else list(modalities[i:i + batch_size])
            out.append(model.forward(arr[i:i + batch_size], mods, training=False).data[:, 0])
    return np.concatenate(out, axis=0)


def predict_masks(model: UNet, slices, modalities: Sequence | None = None) -> np.ndarray:
    return threshold(predict_probs(model, slices, modalities))


def predict_mask(model: UNet, slice_, modality=None) -> np.ndarray:
    """Binary [H, W] mask for one [1, 1, H, W] slice."""
    arr = slice_.data if isinstance(slice_, T.Tensor) else np.asarray(slice_)
    if arr.ndim != 4 or arr.shape[:2] != (1, 1):
        raise T.ShapeError(f"predict_mask expects a [1, 1, H, W] slice, got {arr.shape}")
    return predict_masks(model, arr, None if modality is None else [modality])[0]
