"""Layers, normalization (batch and mode), Adam, and the tagged parameter registry."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .tensor import Tensor, ShapeError, add_bias, conv2d, matmul, softmax, spatial_mean, transpose


class Kind(enum.Enum):
    NORMALIZATION = "normalization"
    OTHER = "other"


class Modality(enum.Enum):
    CT = "CT"
    MRI = "MRI"
    SHARED = "shared"

    @classmethod
    def parse(cls, label: "str | Modality") -> "Modality":
        if isinstance(label, Modality):
            return label
        try:
            return cls(label)
        except ValueError:
            raise ValueError(f"unknown modality label {label!r}") from None


class Role(enum.Enum):
    PARAMETER = "parameter"
    STATISTIC = "statistic"


@dataclass(frozen=True)
class ParamTag:
    kind: Kind
    modality: Modality = Modality.SHARED
    role: Role = Role.PARAMETER

    def __post_init__(self):
        if self.role is Role.STATISTIC and self.kind is not Kind.NORMALIZATION:
            raise ValueError("statistics must be tagged as normalization tensors")

    @property
    def is_norm(self) -> bool:
        return self.kind is Kind.NORMALIZATION

    @property
    def is_statistic(self) -> bool:
        return self.role is Role.STATISTIC

    def with_modality(self, modality: Modality) -> "ParamTag":
        return ParamTag(self.kind, modality, self.role)


OTHER = ParamTag(Kind.OTHER)
NORM_PARAM = ParamTag(Kind.NORMALIZATION, role=Role.PARAMETER)
NORM_STAT = ParamTag(Kind.NORMALIZATION, role=Role.STATISTIC)


class SkeletonError(ValueError):
    """Two parameter sets do not share names, shapes and tag classes."""


class ParamSet:
    """Ordered name -> (array, tag) mapping.

    Arrays are shared, not copied, unless :meth:`copy` is used. A model's live
    registry therefore aliases the model's tensors, which is what lets the
    optimizer update them in place.
    """

    def __init__(self, entries: Iterable[tuple[str, np.ndarray, ParamTag]] = (), version: int = 0):
        self._values: dict[str, np.ndarray] = {}
        self._tags: dict[str, ParamTag] = {}
        self.version = version
        for name, value, tag in entries:
            self.add(name, value, tag)

    def add(self, name: str, value: np.ndarray, tag: ParamTag) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._values[name] = value
        self._tags[name] = tag

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def tag(self, name: str) -> ParamTag:
        return self._tags[name]

    def names(self) -> list[str]:
        return list(self._values)

    def items(self) -> Iterator[tuple[str, np.ndarray, ParamTag]]:
        for name, value in self._values.items():
            yield name, value, self._tags[name]

    def copy(self) -> "ParamSet":
        return ParamSet(((n, v.copy(), t) for n, v, t in self.items()), version=self.version)

    def retag(self, modality: Modality) -> "ParamSet":
        return ParamSet(((n, v, t.with_modality(modality)) for n, v, t in self.items()), version=self.version)

    def skeleton(self) -> list[tuple[str, tuple[int, ...], Kind, Role]]:
        return [(n, v.shape, t.kind, t.role) for n, v, t in self.items()]

    def check_skeleton(self, other: "ParamSet") -> None:
        mine, theirs = self.skeleton(), other.skeleton()
        if mine == theirs:
            return
        a, b = {s[0]: s for s in mine}, {s[0]: s for s in theirs}
        missing = sorted(set(a) - set(b))
        extra = sorted(set(b) - set(a))
        if missing or extra:
            raise SkeletonError(f"skeleton mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name in a:
            if a[name] != b[name]:
                raise SkeletonError(f"skeleton mismatch at {name!r}: {a[name][1:]} vs {b[name][1:]}")
        raise SkeletonError("skeleton mismatch: entry order differs")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet(((n, fn(v), t) for n, v, t in self.items()), version=self.version)

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, tags and values."""
        if self.names() != other.names():
            return False
        return all(self.tag(n) == other.tag(n) and self[n].dtype == other[n].dtype
                   and self[n].shape == other[n].shape
                   and self[n].tobytes() == other[n].tobytes() for n in self)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} entries, version={self.version})"


def registry_partition(params: ParamSet, predicate: Callable[[ParamTag], bool]) -> tuple[ParamSet, ParamSet]:
    """Split into (entries matching ``predicate``, the rest), order preserved."""
    yes, no = ParamSet(version=params.version), ParamSet(version=params.version)
    for name, value, tag in params.items():
        (yes if predicate(tag) else no).add(name, value, tag)
    return yes, no


def merge(*parts: ParamSet, order: Sequence[str] | None = None) -> ParamSet:
    """Union of disjoint parameter sets, optionally reordered to ``order``."""
    out = ParamSet(version=max((p.version for p in parts), default=0))
    for part in parts:
        for name, value, tag in part.items():
            out.add(name, value, tag)
    if order is None:
        return out
    if sorted(order) != sorted(out.names()):
        raise SkeletonError("merge: order does not cover exactly the merged names")
    return ParamSet(((n, out[n], out.tag(n)) for n in order), version=out.version)


# ---- layers ----------------------------------------------------------------

class Conv2d:
    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=np.float64):
        bound = math.sqrt(6.0 / (cin * k * k))  # He-uniform
        self.name = name
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def entries(self):
        yield f"{self.name}.weight", self.weight, OTHER
        yield f"{self.name}.bias", self.bias, OTHER

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class BatchNorm2d:
    def __init__(self, name: str, channels: int, dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.delta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def entries(self):
        yield f"{self.name}.gamma", self.gamma, NORM_PARAM
        yield f"{self.name}.delta", self.delta, NORM_PARAM
        yield f"{self.name}.running_mean", self.running_mean, NORM_STAT
        yield f"{self.name}.running_var", self.running_var, NORM_STAT

    def __call__(self, x: Tensor, modalities=None, training: bool = False) -> Tensor:
        return batchnorm2d(x, self, training)


def batchnorm2d(x: Tensor, state: BatchNorm2d, training: bool) -> Tensor:
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"batchnorm2d: channel dimension mismatch ({c} vs {state.channels})")
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        d = x.data - mu.reshape(1, c, 1, 1)
        var = (d * d).mean(axis=(0, 2, 3))
        k = state.momentum
        state.running_mean.data[...] = (1 - k) * state.running_mean.data + k * mu
        state.running_var.data[...] = (1 - k) * state.running_var.data + k * var
    else:
        mu = state.running_mean.data
        var = np.maximum(state.running_var.data, 0)
        d = x.data - mu.reshape(1, c, 1, 1)
    r = (1.0 / np.sqrt(var + state.eps)).reshape(1, c, 1, 1)
    xhat = d * r
    out = gamma * xhat + state.delta.data.reshape(1, c, 1, 1)
    count = n * h * w

    def _bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gd = g.sum(axis=(0, 2, 3))
        u = g * gamma
        if training:
            su = u.sum(axis=(0, 2, 3), keepdims=True)
            sux = (u * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = r / count * (count * u - su - xhat * sux)
        else:
            gx = u * r
        return gx, gg, gd

    return Tensor._make(out, (x, state.gamma, state.delta), _bw, "batchnorm2d")


class ModeNorm2d:
    """Mode normalization state: per-mode affine, per-mode running moments, optional gate net.

    ``gating`` is ``"learned"`` (softmax gate over spatially pooled features) or
    ``"hard"`` (two modes selected from the slice's modality label).
    """

    def __init__(self, name: str, channels: int, modes: int, gating: str = "learned",
                 rng: np.random.Generator | None = None, dtype=np.float64, eps: float = 1e-5,
                 ema: float = 0.1, mass_weighted_ema: bool = True):
        if gating not in ("learned", "hard"):
            raise ValueError(f"unknown gating {gating!r}")
        if gating == "hard" and modes != 2:
            raise ValueError("hard-gated mode normalization uses exactly 2 modes")
        self.name = name
        self.channels = channels
        self.modes = modes
        self.gating = gating
        self.eps = eps
        self.ema = ema
        self.mass_weighted_ema = mass_weighted_ema
        shape = (modes, channels)
        self.alpha = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.run_mean = Tensor(np.zeros(shape, dtype=dtype))
        self.run_sqmean = Tensor(np.ones(shape, dtype=dtype))
        self.gate_w = self.gate_b = None
        if gating == "learned":
            # zero gate weights would keep every mode identical forever
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = 1.0 / math.sqrt(channels)
            self.gate_w = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
            self.gate_b = Tensor(np.zeros(modes, dtype=dtype), requires_grad=True)

    def entries(self):
        yield f"{self.name}.alpha", self.alpha, NORM_PARAM
        yield f"{self.name}.beta", self.beta, NORM_PARAM
        yield f"{self.name}.run_mean", self.run_mean, NORM_STAT
        yield f"{self.name}.run_sqmean", self.run_sqmean, NORM_STAT
        if self.gate_w is not None:
            yield f"{self.name}.gate_w", self.gate_w, NORM_PARAM
            yield f"{self.name}.gate_b", self.gate_b, NORM_PARAM

    def __call__(self, x: Tensor, modalities=None, training: bool = False) -> Tensor:
        if self.gating == "hard":
            if modalities is None:
                raise ValueError(f"{self.name}: hard-gated layer needs per-slice modality labels")
            gates = hard_gates(modalities, dtype=x.dtype)
        else:
            gates = learned_gates(x, self)
        return modenorm2d(x, self, gates, training)


def learned_gates(x: Tensor, state: ModeNorm2d) -> Tensor:
    """softmax(gate_w . spatial_mean(x_n) + gate_b), one row per sample."""
    if state.gate_w is None:
        raise ValueError(f"{state.name}: layer has no learned gate")
    logits = add_bias(matmul(spatial_mean(x), transpose(state.gate_w)), state.gate_b)
    return softmax(logits)


def hard_gates(modalities: Sequence["str | Modality"], dtype=np.float64) -> Tensor:
    """(1, 0) for CT slices, (0, 1) for MRI slices."""
    g = np.zeros((len(modalities), 2), dtype=dtype)
    for i, label in enumerate(modalities):
        m = Modality.parse(label)
        if m is Modality.CT:
            g[i, 0] = 1
        elif m is Modality.MRI:
            g[i, 1] = 1
        else:
            raise ValueError(f"hard gating needs CT or MRI labels, got {label!r}")
    return Tensor(g)


def modenorm2d(x: Tensor, state: ModeNorm2d, gates: Tensor, training: bool) -> Tensor:
    """Gate-weighted per-mode normalization.

    Mode ``m`` normalizes with the gate-weighted mean/variance over samples and
    pixels, applies its own affine, and the result is mixed by the gates. In
    training mode the running first/second moments of each mode are updated;
    a mode with zero gate mass in the batch is left untouched.
    """
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"modenorm2d: channel dimension mismatch ({c} vs {state.channels})")
    if gates.shape != (n, state.modes):
        raise ShapeError(f"modenorm2d: gates must be [{n}, {state.modes}], got {gates.shape}")
    g = gates.data
    if np.any(g < 0) or np.any(np.abs(g.sum(axis=1) - 1) > 1e-6):
        raise ValueError("modenorm2d: gate rows must be non-negative and sum to 1")

    hw = h * w
    s1 = x.data.mean(axis=(2, 3))
    mass = g.sum(axis=0)
    alpha, beta = state.alpha.data, state.beta.data
    out = np.zeros_like(x.data)
    saved = []
    for m in range(state.modes):
        if training and mass[m] == 0:
            saved.append(None)
            continue
        if training:
            mu = (g[:, m] @ s1) / mass[m]
            d = x.data - mu.reshape(1, c, 1, 1)
            dsq = (d * d).mean(axis=(2, 3))
            var = (g[:, m] @ dsq) / mass[m]
            k = state.ema * (mass[m] / n if state.mass_weighted_ema else 1.0)
            sq = (g[:, m] @ (x.data * x.data).mean(axis=(2, 3))) / mass[m]
            state.run_mean.data[m] = (1 - k) * state.run_mean.data[m] + k * mu
            state.run_sqmean.data[m] = (1 - k) * state.run_sqmean.data[m] + k * sq
        else:
            mu = state.run_mean.data[m]
            var = np.maximum(state.run_sqmean.data[m] - mu * mu, 0)
            d = x.data - mu.reshape(1, c, 1, 1)
            dsq = None
        r = 1.0 / np.sqrt(var + state.eps)
        xhat = d * r.reshape(1, c, 1, 1)
        affine = alpha[m].reshape(1, c, 1, 1) * xhat + beta[m].reshape(1, c, 1, 1)
        out += g[:, m].reshape(n, 1, 1, 1) * affine
        saved.append((mu, var, r, d, xhat, affine, dsq))

    def _bw(gout):
        gx = np.zeros_like(x.data)
        galpha = np.zeros_like(alpha)
        gbeta = np.zeros_like(beta)
        ggates = np.zeros_like(g)
        for m, sv in enumerate(saved):
            if sv is None:
                continue
            mu, var, r, d, xhat, affine, dsq = sv
            gm = g[:, m].reshape(n, 1, 1, 1)
            weighted = gout * gm
            galpha[m] = (weighted * xhat).sum(axis=(0, 2, 3))
            gbeta[m] = weighted.sum(axis=(0, 2, 3))
            ggates[:, m] = (gout * affine).sum(axis=(1, 2, 3))
            u = weighted * alpha[m].reshape(1, c, 1, 1)
            rr = r.reshape(1, c, 1, 1)
            gx += u * rr
            if not training:
                continue
            dmu = -r * u.sum(axis=(0, 2, 3))
            dvar = -0.5 * r ** 3 * (u * d).sum(axis=(0, 2, 3))
            wn = (g[:, m] / (mass[m] * hw)).reshape(n, 1, 1, 1)
            gx += wn * dmu.reshape(1, c, 1, 1) + 2 * wn * d * dvar.reshape(1, c, 1, 1)
            ggates[:, m] += ((s1 - mu) @ dmu + (dsq - var) @ dvar) / mass[m]
        return gx, galpha, gbeta, ggates

    return Tensor._make(out, (x, state.alpha, state.beta, gates), _bw, "modenorm2d")


# ---- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Statistic-role entries are skipped."""
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, value, tag in params.items():
        if tag.is_statistic:
            continue
        grad = grads.get(name)
        if grad is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        value -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)).astype(value.dtype)
