"""Experiment runners: one federation, the full comparison, and the hyper-parameter sweep."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..data import MIXED, ClientDataset, split_clients
from ..federation import STRATEGIES, ClientState, FederationResult, run_federation
from ..metrics import PatientScore
from ..training import volume_dice
from .baselines import centralized_modes, train_centralized, train_local_baselines
from .checkpoint import save_checkpoint
from .config import ConfigError, ExperimentConfig
from .report import BASELINE, Report
from .selection import select_winner

log = logging.getLogger(__name__)

MODELS = (BASELINE, *STRATEGIES, "centralized")


def worker_count() -> int:
    """Parallel worker cap from FSEG_THREADS (default 1)."""
    raw = os.environ.get("FSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"FSEG_THREADS must be a positive integer, got {raw!r}")
    return n


def build_datasets(cfg: ExperimentConfig) -> list[ClientDataset]:
    return split_clients(cfg.clients, cfg.seed, cfg.generator_config())


def federation_members(strategy: str, datasets: Sequence[ClientDataset]) -> list[ClientDataset]:
    """FedNorm federates only the single-modality clients; every other strategy uses all of them."""
    if strategy == "fednorm":
        members = [d for d in datasets if d.modality_mix != MIXED]
        if not members:
            raise ConfigError("fednorm needs at least one CT-only or MRI-only client")
        return members
    return list(datasets)


@dataclass
class StrategyRun:
    strategy: str
    result: FederationResult
    members: list[str]

    @property
    def history(self) -> list[tuple[int, float]]:
        return [(log_.round, log_.global_val) for log_ in self.result.logs]

    def winner(self) -> dict:
        rnd, score = select_winner(self.history)
        return {"round": rnd, "score": score, "last_round": self.result.logs[-1].round,
                "last_score": self.result.logs[-1].global_val}

    def cohorts(self) -> list[list[str]]:
        return [list(log_.selected) for log_ in self.result.logs]

    def scores_on(self, datasets: Sequence[ClientDataset]) -> dict[str, list[PatientScore]]:
        """Dice per patient of the final-round model on every client's test set."""
        states = {c.client_id: c for c in self.result.clients}
        out = {}
        for k, ds in enumerate(datasets):
            client = states.get(ds.client_id) or ClientState.from_dataset(ds, k)
            dice = self.result.evaluate(client, ds.test)
            out[ds.client_id] = [PatientScore(v.patient_id, ds.client_id, float(s)) for v, s in zip(ds.test, dice)]
        return out


def run_strategy(cfg: ExperimentConfig, datasets: Sequence[ClientDataset], strategy: str,
                 **overrides) -> StrategyRun:
    members = federation_members(strategy, datasets)
    fcfg = cfg.federation_config(strategy, **overrides)
    t0 = time.perf_counter()
    result = run_federation(fcfg, members)
    log.info("%s: %d rounds in %.1fs", strategy, fcfg.rounds, time.perf_counter() - t0)
    return StrategyRun(strategy, result, [d.client_id for d in members])


def _rounds_json(runs: dict[str, StrategyRun]) -> str:
    data = {s: [entry.to_dict() for entry in r.result.logs] for s, r in runs.items()}
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> StrategyRun:
    """One federation with the configured strategy; writes round logs and the final checkpoint."""
    if cfg.strategy == "fednorm":
        cfg.reject_mixed("fednorm")
    datasets = build_datasets(cfg)
    run = run_strategy(cfg, datasets, cfg.strategy)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rounds.json").write_text(_rounds_json({cfg.strategy: run}))
    (out / "winner.json").write_text(json.dumps(run.winner(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(run.result.server.full_params(), out / f"{cfg.strategy}.fseg")
    return run


@dataclass
class Comparison:
    report: Report
    runs: dict[str, StrategyRun]
    datasets: list[ClientDataset]
    timings: dict[str, float]


def run_comparison(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   strategies: Sequence[str] = STRATEGIES) -> Comparison:
    """Local and centralized baselines, every strategy, and the per-patient report."""
    timings: dict[str, float] = {}
    t_all = time.perf_counter()
    datasets = build_datasets(cfg)
    ids = [d.client_id for d in datasets]
    b = cfg.baselines
    scores: dict[str, dict[str, list[PatientScore]]] = {}

    def test_scores(model) -> dict[str, list[PatientScore]]:
        return {d.client_id: [PatientScore(v.patient_id, d.client_id, float(s))
                              for v, s in zip(d.test, volume_dice(model, d.test))] for d in datasets}

    t0 = time.perf_counter()
    local = train_local_baselines(datasets, cfg.seed, cfg.model_channels(), b.epochs, b.patience,
                                  cfg.training.batch_size, cfg.training.lr, cfg.dtype)
    scores[BASELINE] = {}
    for d in datasets:
        scores[BASELINE][d.client_id] = test_scores(local[d.client_id].model)[d.client_id]
    timings["local"] = time.perf_counter() - t0

    runs: dict[str, StrategyRun] = {}
    for s in strategies:
        t0 = time.perf_counter()
        runs[s] = run_strategy(cfg, datasets, s)
        scores[s] = runs[s].scores_on(datasets)
        timings[s] = time.perf_counter() - t0

    t0 = time.perf_counter()
    central = train_centralized(datasets, cfg.seed, cfg.model_channels(), b.epochs, b.patience,
                                cfg.training.batch_size, cfg.training.lr, centralized_modes(datasets), cfg.dtype)
    scores["centralized"] = test_scores(central.model)
    timings["centralized"] = time.perf_counter() - t0

    meta = {
        "local_best_epoch": {k: r.best_epoch for k, r in local.items()},
        "centralized": {"modes": centralized_modes(datasets), "best_epoch": central.best_epoch},
        "members": {s: r.members for s, r in runs.items()},
        "cohorts": {s: r.cohorts() for s, r in runs.items()},
        "hyper": {s: cfg.strategy_hyper(s) for s in strategies},
    }
    report = Report(cfg.name, cfg.seed, ids, [BASELINE, *strategies, "centralized"], scores,
                    winners={s: r.winner() for s, r in runs.items()}, meta=meta)
    timings["total"] = time.perf_counter() - t_all
    if out_dir is not None or cfg.output_dir:
        out = Path(out_dir or cfg.output_dir)
        report.write(out)
        (out / "rounds.json").write_text(_rounds_json(runs))
        (out / "report.txt").write_text(report.render())
        (out / "timing.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for s, r in runs.items():
            save_checkpoint(r.result.server.full_params(), ckpt / f"{s}.fseg")
    return Comparison(report, runs, datasets, timings)


# ---- sweep -------------------------------------------------------------------

SWEEP_MODES = (1, 2, 3, 4)
SWEEP_BETAS = (1.0, 0.9, 0.5, 0.2)


def _sweep_point(args: tuple[dict, str, int, float]) -> tuple[str, int, float, int, float]:
    raw, strategy, modes, beta = args
    cfg = ExperimentConfig.from_dict(raw)
    datasets = build_datasets(cfg)
    run = run_strategy(cfg, datasets, strategy, modes=modes, beta=beta)
    rnd, score = select_winner(run.history)
    return strategy, modes, beta, rnd, score


@dataclass
class SweepResult:
    modes: list[int]
    betas: list[float]
    fednorm: dict[tuple[int, float], tuple[int, float]]
    fednorm_plus: dict[float, tuple[int, float]]

    def fednorm_winner(self) -> dict:
        best = None
        for m in self.modes:
            for b in self.betas:
                rnd, score = self.fednorm[(m, b)]
                if best is None or score > best["score"]:
                    best = {"modes": m, "beta": b, "round": rnd, "score": score}
        return best

    def fednorm_plus_winner(self) -> dict:
        best = None
        for b in self.betas:
            rnd, score = self.fednorm_plus[b]
            if best is None or score > best["score"]:
                best = {"beta": b, "round": rnd, "score": score}
        return best

    def to_dict(self) -> dict:
        return {
            "modes": self.modes,
            "betas": self.betas,
            "fednorm": [{"modes": m, "beta": b, "round": r, "score": s}
                        for (m, b), (r, s) in self.fednorm.items()],
            "fednorm_plus": [{"beta": b, "round": r, "score": s} for b, (r, s) in self.fednorm_plus.items()],
            "winners": {"fednorm": self.fednorm_winner(), "fednorm_plus": self.fednorm_plus_winner()},
        }

    def fednorm_table(self) -> list[list[float]]:
        return [[self.fednorm[(m, b)][1] for b in self.betas] for m in self.modes]

    def fednorm_plus_table(self) -> list[list[float]]:
        return [[self.fednorm_plus[b][1] for b in self.betas]]

    def render(self) -> str:
        head = "".join(f"beta={b:<6}".rjust(12) for b in self.betas)
        lines = ["Highest global validation Dice within the run", "", "FedNorm".ljust(10) + head]
        for m, row in zip(self.modes, self.fednorm_table()):
            lines.append(f"M={m}".ljust(10) + "".join(f"{v:.4f}".rjust(12) for v in row))
        lines += ["", "FedNorm+".ljust(10) + head,
                  "M=2".ljust(10) + "".join(f"{v:.4f}".rjust(12) for v in self.fednorm_plus_table()[0]), ""]
        w, wp = self.fednorm_winner(), self.fednorm_plus_winner()
        lines.append(f"winner FedNorm:  M={w['modes']} beta={w['beta']} (round {w['round']}, {w['score']:.4f})")
        lines.append(f"winner FedNorm+: beta={wp['beta']} (round {wp['round']}, {wp['score']:.4f})")
        return "\n".join(lines) + "\n"


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None) -> SweepResult:
    """FedNorm over M x beta on the single-modality clients and FedNorm+ over beta on all clients.

    Grid points are independent and may run in parallel processes
    (FSEG_THREADS); results do not depend on the worker count.
    """
    modes = [int(m) for m in cfg.sweep.get("modes", SWEEP_MODES)]
    betas = [float(b) for b in cfg.sweep.get("betas", SWEEP_BETAS)]
    raw = cfg.to_dict()
    jobs = [(raw, "fednorm", m, b) for m in modes for b in betas] + [(raw, "fednorm_plus", 2, b) for b in betas]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    fednorm, plus = {}, {}
    for strategy, m, b, rnd, score in results:
        if strategy == "fednorm":
            fednorm[(m, b)] = (rnd, score)
        else:
            plus[b] = (rnd, score)
    sweep = SweepResult(modes, betas, fednorm, plus)
    if out_dir is not None or cfg.output_dir:
        out = Path(out_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(json.dumps(sweep.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "model_selection.txt").write_text(sweep.render())
    return sweep
