"""Comparison report: per-patient scores, RI and t-tests, CSV/JSON persistence.

Everything derived (means, RI, p-values) is a pure function of the
per-patient Dice table, so a report re-rendered from ``dice_per_patient.csv``
reproduces the JSON numbers exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..metrics import PatientScore, relative_improvement, t_test_unpaired

CSV_HEADER = ("client_id", "model", "patient_id", "dice")
BASELINE = "local"


@dataclass(frozen=True)
class CellStats:
    n: int
    mean: float
    ri: float | None
    t: float | None
    p: float | None

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "ri": self.ri, "t": self.t, "p": self.p}


def cell_stats(scores: Sequence[float], baseline: Sequence[float]) -> CellStats:
    """Mean Dice, RI against the baseline mean, and a two-sided pooled t-test."""
    mean = math.fsum(scores) / len(scores)
    base = math.fsum(baseline) / len(baseline)
    ri = relative_improvement(base, mean) if base > 0 else None
    t = p = None
    if len(scores) >= 2 and len(baseline) >= 2:
        try:
            t, p = t_test_unpaired(scores, baseline)
        except ZeroDivisionError:
            t, p = None, 0.0
    return CellStats(len(scores), mean, ri, t, p)


@dataclass
class Report:
    name: str
    seed: int
    clients: list[str]
    models: list[str]
    scores: dict[str, dict[str, list[PatientScore]]]
    winners: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if BASELINE not in self.models:
            raise ValueError("a report needs the local baseline")
        for m in self.models:
            for c in self.clients:
                if not self.scores.get(m, {}).get(c):
                    raise ValueError(f"missing per-patient scores for model {m!r} on client {c!r}")

    def dice(self, model: str, client: str) -> list[float]:
        return [s.dice for s in self.scores[model][client]]

    def cell(self, model: str, client: str) -> CellStats:
        return cell_stats(self.dice(model, client), self.dice(BASELINE, client))

    def summary(self) -> dict[str, dict[str, CellStats]]:
        return {m: {c: self.cell(m, c) for c in self.clients} for m in self.models}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "clients": list(self.clients),
            "models": list(self.models),
            "summary": {m: {c: s.to_dict() for c, s in row.items()} for m, row in self.summary().items()},
            "winners": self.winners,
            "meta": self.meta,
        }

    # ---- persistence ------------------------------------------------------

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for m in self.models:
            for c in self.clients:
                for s in self.scores[m][c]:
                    w.writerow([c, m, s.patient_id, repr(float(s.dice))])
        return buf.getvalue()

    def json_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rj, rc = out / "report.json", out / "dice_per_patient.csv"
        rj.write_text(self.json_text())
        rc.write_text(self.csv_text())
        return rj, rc

    def render(self) -> str:
        return render_table(self)


def read_scores_csv(path: str | Path) -> tuple[list[str], list[str], dict[str, dict[str, list[PatientScore]]]]:
    """Parse ``client_id,model,patient_id,dice`` rows, keeping first-appearance order."""
    clients: list[str] = []
    models: list[str] = []
    scores: dict[str, dict[str, list[PatientScore]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            if len(row) != 4:
                raise ValueError(f"{path}: malformed row {row}")
            client, model, pid, dice = row
            if client not in clients:
                clients.append(client)
            if model not in models:
                models.append(model)
            scores.setdefault(model, {}).setdefault(client, []).append(PatientScore(pid, client, float(dice)))
    return clients, models, scores


def load_report(run_dir: str | Path) -> Report:
    """Rebuild a report from ``dice_per_patient.csv`` (plus metadata from report.json if present)."""
    run_dir = Path(run_dir)
    clients, models, scores = read_scores_csv(run_dir / "dice_per_patient.csv")
    meta_path = run_dir / "report.json"
    name, seed, winners, meta = run_dir.name, 0, {}, {}
    if meta_path.exists():
        raw = json.loads(meta_path.read_text())
        name, seed = raw.get("name", name), raw.get("seed", 0)
        winners, meta = raw.get("winners", {}), raw.get("meta", {})
    return Report(name, seed, clients, models, scores, winners, meta)


def _fmt(x: float | None, spec: str) -> str:
    return "-" if x is None else format(x, spec)


def render_table(report: Report) -> str:
    summary = report.summary()
    width = max(12, *(len(m) + 2 for m in report.models))
    lines = [f"{report.name} (seed {report.seed}): mean Dice per patient, RI vs local in %, p vs local", ""]
    lines.append("client".ljust(10) + "".join(m.rjust(width) for m in report.models))
    for c in report.clients:
        lines.append(c.ljust(10) + "".join(_fmt(summary[m][c].mean, ".4f").rjust(width) for m in report.models))
        lines.append("  RI".ljust(10) + "".join(_fmt(summary[m][c].ri, "+.2f").rjust(width) for m in report.models))
        lines.append("  p".ljust(10) + "".join(_fmt(summary[m][c].p, ".3g").rjust(width) for m in report.models))
    if report.winners:
        lines += ["", "best global validation round (final comparison uses the last round):"]
        # model order, not dict order: report.json stores winners with sorted keys
        ordered = [m for m in report.models if m in report.winners]
        ordered += sorted(set(report.winners) - set(ordered))
        for strategy in ordered:
            w = report.winners[strategy]
            lines.append(f"  {strategy:14s} round {w['round']:>3}  score {w['score']:.4f}  "
                         f"last-round score {w['last_score']:.4f}")
    return "\n".join(lines) + "\n"
