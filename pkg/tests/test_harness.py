import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedseg.harness import (
    CheckpointError, ConfigError, EarlyStopping, ExperimentConfig, centralized_modes, global_validation_score,
    load_checkpoint, load_into_model, load_report, run_comparison, run_experiment, run_sweep, save_checkpoint,
    select_winner,
)
from fedseg.harness.checkpoint import decode, encode
from fedseg.harness.cli import main
from fedseg.harness.experiment import MODELS, build_datasets
from fedseg.harness.report import cell_stats, read_scores_csv
from fedseg.harness.selftest import run_selftest
from fedseg.metrics import relative_improvement
from fedseg.model import UNet, UNetConfig
from fedseg.nn import Kind, Modality, SkeletonError

TINY_CFG = {
    "name": "tiny",
    "seed": 2,
    "output_dir": "unused",
    "preset": "desk",
    "channels": [2, 4],
    "generator": {"resolution": 16, "slices": 4},
    "clients": [
        {"id": "ct", "modality": "CT", "patients": 5},
        {"id": "mri", "modality": "MRI", "patients": 5, "mri_variant": 1},
        {"id": "mix", "modality": "Mixed", "patients": 6},
    ],
    "strategy": "fednorm_plus",
    "hyper": {"modes": 2, "beta": 0.5},
    "training": {"rounds": 2, "clients_per_round": 2, "batch_size": 4},
    "baselines": {"epochs": 2, "patience": 1},
    "compare": {"fednorm": {"beta": 0.9}},
    "sweep": {"modes": [1, 2], "betas": [1.0, 0.5]},
}


def tiny(**changes):
    raw = json.loads(json.dumps(TINY_CFG))
    raw.update(changes)
    return ExperimentConfig.from_dict(raw)


@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    out = tmp_path_factory.mktemp("cmp")
    return run_comparison(tiny(), out), out


# ---- selection ---------------------------------------------------------------

def test_global_validation_score():
    assert global_validation_score([0.8, 0.6]) == pytest.approx(0.7)
    assert global_validation_score([0.3] * 5) == 0.3
    with pytest.raises(ValueError):
        global_validation_score([])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.randoms())
def test_global_validation_score_permutation_invariant(scores, rnd):
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    assert global_validation_score(scores) == global_validation_score(shuffled)


def test_select_winner_examples():
    assert select_winner([(1, 0.5), (2, 0.9), (3, 0.7)]) == (2, 0.9)
    assert select_winner([(1, 0.9), (2, 0.9)]) == (1, 0.9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.lists(st.floats(0, 1), max_size=5))
def test_winner_invariant_to_appending_lower_rounds(scores, extra):
    hist = list(enumerate(scores, 1))
    rnd, best = select_winner(hist)
    lower = [(len(hist) + i + 1, min(e, best)) for i, e in enumerate(extra)]
    assert select_winner(hist + lower) == (rnd, best)


# ---- early stopping / baselines ----------------------------------------------

def test_early_stopping_counting():
    stopper = EarlyStopping(5)
    for score in [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]:
        assert not stopper.should_stop
        stopper.update(score)
    assert stopper.should_stop and stopper.epoch == 7 and stopper.best_epoch == 2


def test_centralized_modes_by_setting():
    assert centralized_modes(["CT", "MRI", "CT"]) == 4
    assert centralized_modes(["CT", "MRI", "Mixed"]) == 2


# ---- config ------------------------------------------------------------------

def test_config_round_trip():
    cfg = tiny()
    again = ExperimentConfig.loads(cfg.dumps())
    assert again.to_dict() == cfg.to_dict()
    assert again.dumps() == cfg.dumps()


def test_shipped_desk_config_loads():
    from pathlib import Path
    cfg = ExperimentConfig.load(Path(__file__).resolve().parents[1] / "configs" / "desk.json")
    assert [c.modality for c in cfg.clients] == ["CT", "CT", "MRI", "MRI", "Mixed", "Mixed"]
    assert cfg.model_channels() == [4, 8, 16] and cfg.generator_config().resolution == 32
    assert cfg.training.rounds == 30


@pytest.mark.parametrize("changes,match", [
    ({"strategy": "fednorm"}, "'mix'"),
    ({"strategy": "fedbn", "norm": "mode"}, "requires norm"),
    ({"strategy": "nope"}, "unknown strategy"),
    ({"preset": "huge"}, "unknown preset"),
    ({"hyper": {"beta": 0.0}}, "beta"),
    ({"bogus": 1}, "unknown config keys"),
    ({"generator": {"sparkle": 1}}, "generator"),
    ({"clients": [{"id": "a", "modality": "CT"}, {"id": "a", "modality": "MRI"}]}, "duplicate"),
    ({"clients": [{"id": "a", "modality": "PET"}]}, "modality"),
])
def test_config_validation(changes, match):
    with pytest.raises(ConfigError, match=match):
        tiny(**changes)


def test_strategy_hyper_precedence():
    cfg = tiny()
    assert cfg.strategy_hyper("fednorm")["beta"] == 0.9
    assert cfg.strategy_hyper("fednorm_plus")["beta"] == 0.5
    assert cfg.federation_config("fedavgm").momentum == 0.6
    assert cfg.with_seed(9).seed == 9 and cfg.seed == 2


# ---- checkpoints -------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_bitwise(tmp_path, dtype):
    params = UNet(UNetConfig(channels=[2, 4], norm="mode", modes=3), seed=4, dtype=dtype).params
    path = save_checkpoint(params, tmp_path / "m.fseg")
    assert load_checkpoint(path, params).equals(params)
    assert path.read_bytes()[:4] == b"FSEG"


def test_checkpoint_errors(tmp_path):
    model = UNet(UNetConfig(channels=[2, 4], norm="batch"), seed=1)
    blob = encode(model.params)
    for bad in (blob[:-1], blob[:10], b"NOPE" + blob[4:], blob[:4] + b"\x09\x00" + blob[6:], blob + b"\x00"):
        with pytest.raises(CheckpointError):
            decode(bad)
    path = tmp_path / "t.fseg"
    path.write_bytes(blob[: len(blob) // 2])
    before = encode(model.params)
    with pytest.raises(CheckpointError):
        load_into_model(model, path)
    assert encode(model.params) == before


def test_checkpoint_skeleton_mismatch(tmp_path):
    path = save_checkpoint(UNet(UNetConfig(channels=[2, 4], norm="batch")).params, tmp_path / "a.fseg")
    other = UNet(UNetConfig(channels=[2, 4], norm="none"))
    with pytest.raises((CheckpointError, SkeletonError)):
        load_checkpoint(path, other)
    with pytest.raises((CheckpointError, SkeletonError)):
        load_into_model(other, path)


# ---- comparison report -------------------------------------------------------

def test_comparison_writes_all_artifacts(comparison):
    cmp_, out = comparison
    for name in ("report.json", "dice_per_patient.csv", "rounds.json", "report.txt", "timing.json"):
        assert (out / name).exists()
    assert cmp_.report.models == list(MODELS)
    assert set(cmp_.runs) == set(MODELS) - {"local", "centralized"}
    raw = json.loads((out / "report.json").read_text())
    assert raw["meta"]["members"]["fednorm"] == ["ct", "mri"]
    assert raw["meta"]["centralized"]["modes"] == 2


def test_fednorm_checkpoint_has_modality_tag_groups(comparison):
    _, out = comparison
    params = load_checkpoint(out / "checkpoints" / "fednorm.fseg")
    mods = {params.tag(n).modality for n in params if params.tag(n).kind is Kind.NORMALIZATION}
    assert mods == {Modality.CT, Modality.MRI}
    assert all(params.tag(n).modality is Modality.SHARED for n in params if params.tag(n).kind is Kind.OTHER)


def test_report_cells_and_ri_recomputation(comparison):
    report = comparison[0].report
    local_cells = report.summary()["local"]
    for model, cells in report.summary().items():
        for client, cell in cells.items():
            scores = [s.dice for s in report.scores[model][client]]
            assert cell.n == len(scores) and cell.mean == math.fsum(scores) / len(scores)
            base = local_cells[client].mean
            assert cell.ri == pytest.approx(relative_improvement(base, cell.mean), abs=1e-12)
    for cell in local_cells.values():
        assert cell.ri == 0 and cell.p == 1.0


def test_report_regenerates_from_csv(comparison):
    report, out = comparison[0].report, comparison[1]
    again = load_report(out)
    assert again.json_text() == report.json_text()
    assert again.render() == (out / "report.txt").read_text()
    clients, models, scores = read_scores_csv(out / "dice_per_patient.csv")
    assert clients == report.clients and models == report.models


def test_cell_stats_degenerate():
    assert cell_stats([0.5, 0.5], [0.7, 0.7]).p == 0.0
    assert cell_stats([0.5], [0.5, 0.6]).p is None


def test_comparison_cohorts_shared(comparison):
    runs = comparison[0].runs
    ref = runs["fedavg"].cohorts()
    for name, run in runs.items():
        if name != "fednorm":
            assert run.cohorts() == ref


# ---- run / sweep -------------------------------------------------------------

def test_run_experiment_outputs(tmp_path):
    run = run_experiment(tiny(), tmp_path)
    w = json.loads((tmp_path / "winner.json").read_text())
    assert w == run.winner() and w["last_round"] == 2
    assert set(json.loads((tmp_path / "rounds.json").read_text())) == {"fednorm_plus"}
    assert (tmp_path / "fednorm_plus.fseg").exists()


def test_sweep_structure_and_winner_rule(tmp_path):
    res = run_sweep(tiny(), tmp_path, workers=1)
    assert len(res.fednorm_table()) == 2 and all(len(r) == 2 for r in res.fednorm_table())
    assert len(res.fednorm_plus_table()) == 1 and len(res.fednorm_plus_table()[0]) == 2
    best = max(s for _, s in res.fednorm.values())
    first = next((m, b) for m in res.modes for b in res.betas if res.fednorm[(m, b)][1] == best)
    w = res.fednorm_winner()
    assert (w["modes"], w["beta"]) == first
    assert (tmp_path / "sweep.json").exists() and "winner FedNorm" in (tmp_path / "model_selection.txt").read_text()


# ---- cli ---------------------------------------------------------------------

def _write(tmp_path, **changes):
    raw = json.loads(json.dumps(TINY_CFG))
    raw.update(changes)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return str(path)


def test_cli_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert run_selftest(verbose=False)


def test_cli_fednorm_with_mixed_client_is_validation_error(tmp_path, capsys):
    assert main(["run", _write(tmp_path, strategy="fednorm")]) == 1
    assert "'mix'" in capsys.readouterr().err


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["run", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["run", str(tmp_path / "missing.json")]) == 1
    assert main(["report", str(tmp_path)]) == 1


def test_cli_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FSEG_THREADS", "zero")
    assert main(["run", _write(tmp_path)]) == 1


def test_cli_run_and_report(tmp_path, comparison, capsys):
    assert main(["run", _write(tmp_path), "--seed", "5", "--out", str(tmp_path / "r")]) == 0
    assert "fednorm_plus" in capsys.readouterr().out
    assert main(["report", str(comparison[1])]) == 0
    assert capsys.readouterr().out == (comparison[1] / "report.txt").read_text()


def test_cli_runtime_failure_exit_code(tmp_path):
    # a generator field of the wrong type passes validation but fails when volumes are built
    bad = _write(tmp_path, generator={"resolution": 16, "slices": 4, "noise": "loud"})
    assert main(["run", bad, "--out", str(tmp_path / "x")]) == 2


def test_build_datasets_follow_generator(tmp_path):
    ds = build_datasets(tiny())
    assert ds[0].train[0].slices.shape == (4, 16, 16)
