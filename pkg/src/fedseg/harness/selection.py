"""Global validation score and winner selection."""
from __future__ import annotations

import math
from typing import Iterable, Sequence


def global_validation_score(local_scores: Iterable[float]) -> float:
    """Unweighted mean of one validation score per federation client."""
    scores = [float(s) for s in local_scores]
    if not scores:
        raise ValueError("global validation score needs at least one client score")
    return math.fsum(scores) / len(scores)


def select_winner(history: Sequence[tuple[int, float]]) -> tuple[int, float]:
    """(round, score) with the highest score; the earliest round wins ties."""
    if not history:
        raise ValueError("empty validation history")
    best = history[0]
    for entry in history[1:]:
        if entry[1] > best[1]:
            best = entry
    return int(best[0]), float(best[1])
