# utils/comparison.py
"""
Module `comparison` for depth-trace.

Compares each analysed turn of a trajectory with the turn analysed just
before it: how much stronger the cross-layer dependencies got, how far down
the network they reach, how often the residual flips between amplification
and correction, and how far the per-layer cosine profile moved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from utils.causal import FutureEffectMap
from utils.probes import CosineProfile, VARIANTS, count_phase_changes

STRONG_EFFECT = 0.1

# cosine-profile distance bands for the change label
CHANGE_BANDS = ((0.0, "identical"), (0.1, "slight"), (0.3, "moderate"))


@dataclass(frozen=True)
class TurnSummary:
    turn: int
    mean_effect: float | None
    strong_count: int
    mean_reach: float | None
    phase_changes: dict[str, int]
    cosine_aggregate: tuple[float, ...]


def summarize_turn(
    fe_map: FutureEffectMap,
    profiles: dict[str, CosineProfile],
    *,
    tau: float = 0.05,
    strong: float = STRONG_EFFECT,
) -> TurnSummary:
    defined = [(s, l, v) for s, l, v, _, _ in fe_map.entries() if v is not None]
    strong_entries = [(s, l) for s, l, v in defined if v >= strong]
    mean_effect = float(np.mean([v for _, _, v in defined])) if defined else None
    mean_reach = float(np.mean([l - s for s, l in strong_entries])) if strong_entries else None
    phase_changes = {v: count_phase_changes(profiles[v].aggregate, tau) for v in VARIANTS if v in profiles}
    aggregate = tuple(float(x) for x in profiles["block"].aggregate)
    return TurnSummary(fe_map.turn, mean_effect, len(strong_entries), mean_reach, phase_changes, aggregate)


def _delta(current: float | None, previous: float | None) -> float | None:
    if current is None or previous is None:
        return None
    return current - previous


def profile_distance(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    """Euclidean distance over the layers defined in both profiles."""
    pairs = [(x, y) for x, y in zip(a, b) if not (math.isnan(x) or math.isnan(y))]
    return sum((x - y) ** 2 for x, y in pairs) ** 0.5


def change_label(distance: float) -> str:
    for bound, label in CHANGE_BANDS:
        if distance <= bound:
            return label
    return "significant"


def compare_turns(previous: TurnSummary, current: TurnSummary) -> dict:
    distance = profile_distance(previous.cosine_aggregate, current.cosine_aggregate)
    return {
        "from_turn": previous.turn,
        "to_turn": current.turn,
        "delta_mean_effect": _delta(current.mean_effect, previous.mean_effect),
        "delta_strong_count": current.strong_count - previous.strong_count,
        "delta_mean_reach": _delta(current.mean_reach, previous.mean_reach),
        "delta_phase_changes": {
            v: current.phase_changes[v] - previous.phase_changes[v]
            for v in current.phase_changes
            if v in previous.phase_changes
        },
        "cosine_distance": distance,
        "change": change_label(distance),
    }


def compare_trajectory(summaries: list[TurnSummary]) -> dict:
    ordered = sorted(summaries, key=lambda s: s.turn)
    return {
        "turns": [
            {
                "turn": s.turn,
                "mean_effect": s.mean_effect,
                "strong_count": s.strong_count,
                "mean_reach": s.mean_reach,
                "phase_changes": dict(s.phase_changes),
            }
            for s in ordered
        ],
        "transitions": [compare_turns(a, b) for a, b in zip(ordered, ordered[1:])],
    }
