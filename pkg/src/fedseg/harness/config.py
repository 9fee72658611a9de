"""JSON experiment configuration.

One document describes the federation (client list and generator), the
strategy under test with its hyper-parameters, the model preset, the
training schedule and the baseline budget. Example::

    {
      "name": "desk",
      "seed": 0,
      "output_dir": "runs/desk",
      "preset": "desk",
      "generator": {"noise": 0.03},
      "clients": [{"id": "ct-a", "modality": "CT", "patients": 10}, ...],
      "strategy": "fednorm_plus",
      "hyper": {"modes": 2, "beta": 0.5, "momentum": 0.6},
      "training": {"rounds": 30, "clients_per_round": 2, "local_epochs": 1,
                   "batch_size": 12, "lr": 0.001},
      "baselines": {"epochs": 50, "patience": 5},
      "compare": {"fednorm": {"modes": 2, "beta": 0.9}, "fednorm_plus": {"beta": 0.5}},
      "sweep": {"modes": [1, 2, 3, 4], "betas": [1.0, 0.9, 0.5, 0.2]}
    }
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..data import CLIENT_MIXES, MIXED, ClientSpec, GeneratorConfig
from ..federation import ARCHITECTURE, STRATEGIES, FederationConfig
from ..model import NORM_KINDS

PRESETS = {
    "desk": {"channels": [4, 8, 16], "resolution": 32, "slices": 8},
    "full": {"channels": [8, 16, 32, 64], "resolution": 256, "slices": 8},
}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


@dataclass
class TrainingConfig:
    rounds: int = 30
    clients_per_round: int = 2
    local_epochs: int = 1
    batch_size: int = 12
    lr: float = 1e-3


@dataclass
class BaselineConfig:
    epochs: int = 50
    patience: int = 5


@dataclass
class ExperimentConfig:
    name: str
    clients: list[ClientSpec]
    strategy: str = "fednorm_plus"
    seed: int = 0
    output_dir: str = "runs/default"
    preset: str = "desk"
    channels: list[int] | None = None
    norm: str | None = None
    dtype: str = "float32"
    generator: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    compare: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # ---- validation -------------------------------------------------------

    def validate(self) -> None:
        if not self.clients:
            raise ConfigError("at least one client is required")
        ids = [c.id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate client ids in {ids}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.norm is not None:
            if self.norm not in NORM_KINDS:
                raise ConfigError(f"unknown norm {self.norm!r}")
            if self.norm != ARCHITECTURE[self.strategy]:
                raise ConfigError(f"strategy {self.strategy} requires norm {ARCHITECTURE[self.strategy]!r}, "
                                  f"got {self.norm!r}")
        if self.strategy == "fednorm":
            self.reject_mixed("fednorm")
        t = self.training
        if t.rounds < 1 or t.local_epochs < 1 or t.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must be positive")
        if not 1 <= t.clients_per_round <= len(self.clients):
            raise ConfigError(f"clients_per_round must lie in [1, {len(self.clients)}]")
        if t.lr < 0:
            raise ConfigError("lr must be non-negative")
        beta = self.hyper.get("beta", 1.0)
        if not 0.0 < float(beta) <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {beta}")
        modes = int(self.hyper.get("modes", 2))
        if modes < 1:
            raise ConfigError("modes must be at least 1")
        if self.baselines.epochs < 1 or self.baselines.patience < 1:
            raise ConfigError("baseline epochs and patience must be positive")
        try:
            GeneratorConfig(**self.generator_dict())
        except TypeError as exc:
            raise ConfigError(f"bad generator parameters: {exc}") from None

    def reject_mixed(self, strategy: str) -> None:
        for c in self.clients:
            if c.modality == MIXED:
                raise ConfigError(f"{strategy} cannot run with mixed-modality client {c.id!r}")

    # ---- derived views ----------------------------------------------------

    def generator_dict(self) -> dict:
        base = {k: PRESETS[self.preset][k] for k in ("resolution", "slices")}
        base.update(self.generator)
        if "distractor_size" in base:
            base["distractor_size"] = tuple(base["distractor_size"])
        return base

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(**self.generator_dict())

    def model_channels(self) -> list[int]:
        return list(self.channels if self.channels is not None else PRESETS[self.preset]["channels"])

    def has_mixed(self) -> bool:
        return any(c.modality == MIXED for c in self.clients)

    def strategy_hyper(self, strategy: str) -> dict:
        """Hyper-parameters for ``strategy``: the ``compare`` overrides win over ``hyper``."""
        out = {"modes": 2, "beta": 1.0, "momentum": 0.6}
        out.update(self.hyper)
        out.update(self.compare.get(strategy, {}))
        return out

    def federation_config(self, strategy: str | None = None, **overrides) -> FederationConfig:
        strategy = strategy or self.strategy
        h = self.strategy_hyper(strategy)
        kw = dict(strategy=strategy, rounds=self.training.rounds,
                  clients_per_round=self.training.clients_per_round,
                  local_epochs=self.training.local_epochs, batch_size=self.training.batch_size,
                  lr=self.training.lr, beta=float(h["beta"]), momentum=float(h["momentum"]),
                  modes=int(h["modes"]), channels=self.model_channels(), seed=self.seed, dtype=self.dtype)
        kw.update(overrides)
        return FederationConfig(**kw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        out.seed = int(seed)
        return out

    # ---- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["clients"] = [asdict(c) for c in self.clients]
        d["training"] = asdict(self.training)
        d["baselines"] = asdict(self.baselines)
        return copy.deepcopy(d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "name" not in raw or "clients" not in raw:
            raise ConfigError("config needs 'name' and 'clients'")
        d = copy.deepcopy(raw)
        try:
            d["clients"] = [_client(c) for c in d["clients"]]
            d["training"] = TrainingConfig(**d.get("training", {}))
            d["baselines"] = BaselineConfig(**d.get("baselines", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text)


def _client(raw: dict) -> ClientSpec:
    if not isinstance(raw, dict) or "id" not in raw or "modality" not in raw:
        raise ConfigError(f"client entries need 'id' and 'modality': {raw!r}")
    if raw["modality"] not in CLIENT_MIXES:
        raise ConfigError(f"client {raw['id']!r}: modality must be one of {CLIENT_MIXES}")
    try:
        return ClientSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"client {raw['id']!r}: {exc}") from None
