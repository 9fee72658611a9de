"""Server/client round protocol and the seven aggregation strategies.

Strategies: ``fedavg``, ``fedavgm`` (server momentum), ``fedvc`` (virtual
clients: equal local step budget, size-proportional selection), ``silobn``
(BN statistics stay local), ``fedbn`` (all BN tensors stay local), ``fednorm``
(per-modality normalization sets with interpolated updates) and
``fednorm_plus`` (hard-gated two-mode model, interpolation on every tensor).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import MIXED, ClientDataset, Volume, _rng
from .model import UNet, UNetConfig
from .nn import AdamState, Kind, Modality, ParamSet, Role, merge, registry_partition
from .training import client_rng, mean_dice, train_epochs, train_fixed_steps, volume_dice

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedavgm", "fedvc", "silobn", "fedbn", "fednorm", "fednorm_plus")
ARCHITECTURE = {
    "fedavg": "none",
    "fedavgm": "none",
    "fedvc": "none",
    "silobn": "batch",
    "fedbn": "batch",
    "fednorm": "mode",
    "fednorm_plus": "hard_mode",
}


class FederationError(ValueError):
    pass


# ---- state -----------------------------------------------------------------

@dataclass
class ClientState:
    client_id: str
    index: int
    dataset: ClientDataset
    declared_modality: str
    local_private_params: ParamSet | None = None
    optimizer: AdamState | None = None

    @classmethod
    def from_dataset(cls, dataset: ClientDataset, index: int) -> "ClientState":
        return cls(dataset.client_id, index, dataset, dataset.modality_mix)


@dataclass
class ServerState:
    strategy: str
    global_params: ParamSet
    num_clients: int
    seed: int = 0
    round: int = 0
    hyper: dict = field(default_factory=dict)
    modality_norm_params: dict[Modality, ParamSet] = field(default_factory=dict)
    velocity: ParamSet | None = None
    initial_private: ParamSet | None = None
    order: list[str] = field(default_factory=list)

    def full_params(self) -> ParamSet:
        """Everything the server holds, modality sets suffixed ``@CT`` / ``@MRI``."""
        out = self.global_params.copy()
        for mod, ps in self.modality_norm_params.items():
            for name, value, tag in ps.items():
                out.add(f"{name}@{mod.value}", value.copy(), tag.with_modality(mod))
        out.version = self.round
        return out


@dataclass
class RoundUpdate:
    client_id: str
    params_after: ParamSet
    n_k: int
    train_loss: float
    val_dice_pre: float
    modality: str = "CT"
    steps: int = 0

    def __post_init__(self):
        if self.n_k <= 0:
            raise FederationError(f"client {self.client_id}: n_k must be positive")


@dataclass
class RoundLog:
    round: int
    selected: list[str]
    val_dice: dict[str, float]
    global_val: float
    train_loss: dict[str, float]

    def to_dict(self) -> dict:
        return {"round": self.round, "selected": self.selected, "val_dice": self.val_dice,
                "global_val": self.global_val, "train_loss": self.train_loss}


# ---- client sampling -------------------------------------------------------

def weighted_draw(rng: np.random.Generator, weights: Sequence[float]) -> int:
    """One index drawn with probability proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(w) / w.sum()
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), len(w) - 1))


def sample_clients(round_: int, master_seed: int, num_clients: int, m: int = 2,
                   weights: Sequence[float] | None = None) -> list[int]:
    """Cohort of ``m`` distinct clients, derived only from (seed, round).

    Draws with replacement (uniform, or proportional to ``weights``) until
    ``m`` distinct clients are found, so uniform weights reproduce the plain
    uniform cohort exactly.
    """
    if m > num_clients:
        raise FederationError(f"cannot sample {m} of {num_clients} clients")
    if weights is None:
        weights = [1.0] * num_clients
    rng = _rng(master_seed, 303, round_)
    chosen: list[int] = []
    while len(chosen) < m:
        k = weighted_draw(rng, weights)
        if k not in chosen:
            chosen.append(k)
    return sorted(chosen)


def fedvc_plan(clients: Sequence[ClientState], batch_size: int) -> tuple[int, list[float]]:
    """Local step budget floor(min N_k / B) and size-proportional selection weights."""
    sizes = [c.dataset.n_train for c in clients]
    steps = min(sizes) // batch_size
    if steps == 0:
        raise FederationError(f"smallest client has {min(sizes)} training slices, fewer than one batch of {batch_size}")
    total = float(sum(sizes))
    return steps, [n / total for n in sizes]


# ---- aggregation -----------------------------------------------------------

def weighted_average(sets: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Entrywise sum of w_k * theta_k in the given order, accumulated in float64."""
    if not sets:
        raise FederationError("nothing to aggregate")
    ref = sets[0]
    for s in sets[1:]:
        ref.check_skeleton(s)
    out = ParamSet(version=ref.version)
    for name, value, tag in ref.items():
        acc = np.zeros(value.shape, dtype=np.float64)
        for s, w in zip(sets, weights):
            acc += w * s[name].astype(np.float64)
        out.add(name, acc.astype(value.dtype), tag)
    return out


def _ordered(updates: Sequence[RoundUpdate]) -> list[RoundUpdate]:
    return sorted(updates, key=lambda u: u.client_id)


def _fedavg_sets(updates: Sequence[RoundUpdate], select: Callable[[ParamSet], ParamSet] = lambda p: p) -> ParamSet:
    ups = _ordered(updates)
    total = float(sum(u.n_k for u in ups))
    return weighted_average([select(u.params_after) for u in ups], [u.n_k / total for u in ups])


def aggregate_fedavg(updates: Sequence[RoundUpdate]) -> ParamSet:
    return _fedavg_sets(updates)


def aggregate_fedavgm(updates: Sequence[RoundUpdate], server: ServerState, momentum: float = 0.6) -> ParamSet:
    """v <- momentum * v + (theta_t - avg); theta_{t+1} = theta_t - v."""
    avg = aggregate_fedavg(updates)
    old = server.global_params
    old.check_skeleton(avg)
    if server.velocity is None:
        server.velocity = old.map(lambda a: np.zeros(a.shape, dtype=np.float64))
    velocity = ParamSet()
    new = ParamSet(version=old.version)
    for name, value, tag in old.items():
        delta = value.astype(np.float64) - avg[name].astype(np.float64)
        v = momentum * server.velocity[name] + delta
        velocity.add(name, v, tag)
        new.add(name, (value.astype(np.float64) - v).astype(value.dtype), tag)
    server.velocity = velocity
    return new


def _is_norm_stat(tag) -> bool:
    return tag.kind is Kind.NORMALIZATION and tag.role is Role.STATISTIC


def _is_norm(tag) -> bool:
    return tag.kind is Kind.NORMALIZATION


def aggregate_silobn(updates: Sequence[RoundUpdate]) -> ParamSet:
    """FedAvg of everything except normalization statistics."""
    return _fedavg_sets(updates, lambda p: registry_partition(p, _is_norm_stat)[1])


def aggregate_fedbn(updates: Sequence[RoundUpdate]) -> ParamSet:
    """FedAvg of non-normalization tensors only."""
    return _fedavg_sets(updates, lambda p: registry_partition(p, _is_norm)[1])


def interpolate(old: ParamSet, new: ParamSet, beta: float) -> ParamSet:
    """(1 - beta) * old + beta * new, per tensor."""
    if not 0.0 < beta <= 1.0:
        raise FederationError(f"interpolation ratio must lie in (0, 1], got {beta}")
    old.check_skeleton(new)
    if beta == 1.0:
        return new.copy()
    out = ParamSet(version=new.version)
    for name, value, tag in old.items():
        mixed = (1.0 - beta) * value.astype(np.float64) + beta * new[name].astype(np.float64)
        out.add(name, mixed.astype(value.dtype), tag)
    return out


def _declared(client: ClientState) -> Modality:
    if client.declared_modality == MIXED:
        raise FederationError(f"client {client.client_id}: fednorm cannot handle mixed-modality clients")
    return Modality.parse(client.declared_modality)


def fednorm_distribute(server: ServerState, client: ClientState | Modality | str) -> ParamSet:
    """Non-normalization parameters plus the normalization set of the client's modality."""
    mod = _declared(client) if isinstance(client, ClientState) else Modality.parse(client)
    if mod not in server.modality_norm_params:
        raise FederationError(f"no normalization set for modality {mod.value}")
    payload = merge(server.global_params.copy(), server.modality_norm_params[mod].retag(mod).copy())
    if server.order:
        payload = merge(payload, order=server.order)
    return payload


def fednorm_aggregate(updates: Sequence[RoundUpdate], server: ServerState, beta: float = 0.9) -> ServerState:
    """Non-normalization: FedAvg over all updates. Normalization: per-modality FedAvg, then
    interpolation with the previous modality set. A modality absent this round keeps its set."""
    server.global_params = _fedavg_sets(updates, lambda p: registry_partition(p, _is_norm)[1])
    for mod in (Modality.CT, Modality.MRI):
        group = [u for u in updates if Modality.parse(u.modality) is mod]
        if not group:
            continue
        avg = _fedavg_sets(group, lambda p: registry_partition(p, _is_norm)[0].retag(mod))
        server.modality_norm_params[mod] = interpolate(server.modality_norm_params[mod], avg, beta)
    server.round += 1
    return server


def fednorm_plus_aggregate(updates: Sequence[RoundUpdate], server: ServerState, beta: float = 0.5) -> ServerState:
    """FedAvg over every tensor (each mode's tensors are distinct entries), then interpolation."""
    if server.hyper.get("norm", "hard_mode") != "hard_mode":
        raise FederationError("fednorm_plus requires a hard-gated two-mode architecture")
    avg = aggregate_fedavg(updates)
    server.global_params = interpolate(server.global_params, avg, beta)
    server.round += 1
    return server


# ---- strategies ------------------------------------------------------------

@dataclass
class FederationConfig:
    strategy: str = "fedavg"
    rounds: int = 30
    clients_per_round: int = 2
    local_epochs: int = 1
    batch_size: int = 12
    lr: float = 1e-3
    beta: float = 1.0
    momentum: float = 0.6
    modes: int = 2
    channels: list[int] = field(default_factory=lambda: [4, 8, 16])
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise FederationError(f"unknown strategy {self.strategy!r}")

    def model_config(self) -> UNetConfig:
        norm = ARCHITECTURE[self.strategy]
        return UNetConfig(channels=list(self.channels), norm=norm, modes=2 if norm == "hard_mode" else self.modes)


class Strategy:
    name = "fedavg"

    def __init__(self, cfg: FederationConfig):
        self.cfg = cfg

    def init_server(self, initial: ParamSet, num_clients: int) -> ServerState:
        return ServerState(self.name, initial.copy(), num_clients, seed=self.cfg.seed,
                           hyper={"norm": ARCHITECTURE[self.name]}, order=initial.names())

    def check_client(self, client: ClientState) -> None:
        pass

    def select(self, round_: int, clients: Sequence[ClientState]) -> list[int]:
        return sample_clients(round_, self.cfg.seed, len(clients), self.cfg.clients_per_round)

    def local_steps(self, clients: Sequence[ClientState]) -> int | None:
        return None

    def payload(self, server: ServerState, client: ClientState) -> ParamSet:
        return server.global_params.copy()

    def eval_state(self, server: ServerState, client: ClientState, modality: Modality | None = None) -> ParamSet:
        return self.payload(server, client)

    def after_local(self, client: ClientState, update: RoundUpdate) -> None:
        pass

    def aggregate(self, server: ServerState, updates: Sequence[RoundUpdate]) -> None:
        server.global_params = aggregate_fedavg(updates)
        server.round += 1


class FedAvg(Strategy):
    name = "fedavg"


class FedAvgM(Strategy):
    name = "fedavgm"

    def aggregate(self, server, updates):
        server.global_params = aggregate_fedavgm(updates, server, self.cfg.momentum)
        server.round += 1


class FedVC(Strategy):
    name = "fedvc"

    def select(self, round_, clients):
        _, weights = fedvc_plan(clients, self.cfg.batch_size)
        return sample_clients(round_, self.cfg.seed, len(clients), self.cfg.clients_per_round, weights)

    def local_steps(self, clients):
        return fedvc_plan(clients, self.cfg.batch_size)[0]


class _PrivateNorm(Strategy):
    """Shared logic for strategies that keep part of the BN state on each client."""

    keep: Callable = staticmethod(_is_norm_stat)

    def init_server(self, initial, num_clients):
        private, shared = registry_partition(initial, self.keep)
        server = ServerState(self.name, shared.copy(), num_clients, seed=self.cfg.seed,
                             hyper={"norm": "batch"}, order=initial.names())
        server.initial_private = private.copy()
        return server

    def payload(self, server, client):
        private = client.local_private_params if client.local_private_params is not None else server.initial_private
        return merge(server.global_params.copy(), private.copy(), order=server.order)

    def after_local(self, client, update):
        client.local_private_params = registry_partition(update.params_after, self.keep)[0].copy()

    def aggregate(self, server, updates):
        agg = aggregate_silobn if self.keep is _is_norm_stat else aggregate_fedbn
        server.global_params = agg(updates)
        server.round += 1


class SiloBN(_PrivateNorm):
    name = "silobn"
    keep = staticmethod(_is_norm_stat)


class FedBN(_PrivateNorm):
    name = "fedbn"
    keep = staticmethod(_is_norm)


class FedNorm(Strategy):
    name = "fednorm"

    def init_server(self, initial, num_clients):
        norm, other = registry_partition(initial, _is_norm)
        server = ServerState(self.name, other.copy(), num_clients, seed=self.cfg.seed,
                             hyper={"norm": "mode", "modes": self.cfg.modes, "beta": self.cfg.beta},
                             order=initial.names())
        server.modality_norm_params = {Modality.CT: norm.retag(Modality.CT).copy(),
                                       Modality.MRI: norm.retag(Modality.MRI).copy()}
        return server

    def check_client(self, client):
        _declared(client)

    def payload(self, server, client):
        return fednorm_distribute(server, client)

    def eval_state(self, server, client, modality=None):
        if modality is not None:
            return fednorm_distribute(server, modality)
        return fednorm_distribute(server, client)

    def aggregate(self, server, updates):
        fednorm_aggregate(updates, server, self.cfg.beta)


class FedNormPlus(Strategy):
    name = "fednorm_plus"

    def init_server(self, initial, num_clients):
        server = super().init_server(initial, num_clients)
        server.hyper["beta"] = self.cfg.beta
        return server

    def aggregate(self, server, updates):
        fednorm_plus_aggregate(updates, server, self.cfg.beta)


_REGISTRY = {cls.name: cls for cls in (FedAvg, FedAvgM, FedVC, SiloBN, FedBN, FedNorm, FedNormPlus)}


def make_strategy(cfg: FederationConfig) -> Strategy:
    return _REGISTRY[cfg.strategy](cfg)


# ---- protocol --------------------------------------------------------------

def local_train(client: ClientState, received: ParamSet, model: UNet, round_: int, cfg: FederationConfig,
                steps: int | None = None, val_dice_pre: float | None = None) -> RoundUpdate:
    """Validate the received model, then train locally with a fresh Adam state."""
    model.load_state(received)
    if val_dice_pre is None:
        val_dice_pre = mean_dice(model, client.dataset.val)
    x, y, mods = client.dataset.arrays("train")
    if len(x) == 0:
        raise FederationError(f"client {client.client_id}: empty training set")
    client.optimizer = AdamState(lr=cfg.lr)
    rng = client_rng(cfg.seed, client.index, round_)
    if steps is None:
        res = train_epochs(model, x, y, mods, client.optimizer, cfg.batch_size, cfg.local_epochs, rng)
        n_k = len(x)
    else:
        res = train_fixed_steps(model, x, y, mods, client.optimizer, cfg.batch_size, steps, rng)
        n_k = steps * cfg.batch_size
    modality = client.declared_modality
    return RoundUpdate(client.client_id, model.state_dict(), n_k, res.mean_loss, float(val_dice_pre),
                       modality=modality, steps=res.steps)


@dataclass
class FederationResult:
    strategy: Strategy
    server: ServerState
    clients: list[ClientState]
    logs: list[RoundLog]
    model: UNet

    def load_for(self, client: ClientState, modality: Modality | None = None) -> UNet:
        """Load the final global model (plus the client's private pieces) into ``model``."""
        self.model.load_state(self.strategy.eval_state(self.server, client, modality))
        return self.model

    def evaluate(self, client: ClientState, volumes: Sequence[Volume]) -> list[float]:
        """Dice per patient on ``volumes`` with the final model as this client sees it."""
        if isinstance(self.strategy, FedNorm):
            scores = {}
            for mod in (Modality.CT, Modality.MRI):
                group = [v for v in volumes if v.modality is mod]
                if group:
                    self.load_for(client, mod)
                    scores.update({id(v): s for v, s in zip(group, volume_dice(self.model, group))})
            return [scores[id(v)] for v in volumes]
        self.load_for(client)
        return volume_dice(self.model, volumes)


def run_federation(cfg: FederationConfig, datasets: Sequence[ClientDataset],
                   on_round: Callable[[RoundLog, ServerState], None] | None = None) -> FederationResult:
    """T rounds of sample -> validate -> distribute -> local train -> aggregate."""
    strategy = make_strategy(cfg)
    clients = [ClientState.from_dataset(d, i) for i, d in enumerate(datasets)]
    for c in clients:
        strategy.check_client(c)
    model = UNet(cfg.model_config(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    server = strategy.init_server(model.state_dict(), len(clients))
    steps = strategy.local_steps(clients)
    logs = []
    for t in range(1, cfg.rounds + 1):
        selected = strategy.select(t, clients)
        val = {}
        for c in clients:
            model.load_state(strategy.eval_state(server, c))
            val[c.client_id] = mean_dice(model, c.dataset.val)
        updates = []
        for k in selected:
            c = clients[k]
            upd = local_train(c, strategy.payload(server, c), model, t, cfg, steps, val[c.client_id])
            strategy.after_local(c, upd)
            updates.append(upd)
        strategy.aggregate(server, updates)
        entry = RoundLog(t, [clients[k].client_id for k in selected], val,
                         math.fsum(val.values()) / len(val), {u.client_id: u.train_loss for u in updates})
        logs.append(entry)
        log.info("%s round %d: selected=%s global_val=%.4f", cfg.strategy, t, entry.selected, entry.global_val)
        if on_round is not None:
            on_round(entry, server)
    return FederationResult(strategy, server, clients, logs, model)
