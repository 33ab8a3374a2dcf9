# utils/probes.py
"""
Module `probes` for depth-trace.

Residual-stream geometry:
1. Loads probe thresholds from `config/probe_defaults.json`.
2. Measures how each block's update lines up with the residual it is added
   to, S(l) = cossim(u_l, h_l), per recorded position, plus the attention-only
   (a_l) and MoE-only (m_l) variants.
3. Labels every layer as injection (|S| <= tau), amplification (S > tau) or
   correction (S < -tau) and counts flips between amplification and
   correction along depth.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from utils.errors import ParameterError
from utils.model import ResidualTrace
from utils.numerics import cosine_similarity

logger = logging.getLogger(__name__)

PROBE_DEFAULTS_PATH = Path(__file__).resolve().parents[1] / "config" / "probe_defaults.json"

INJECTION = "injection"
AMPLIFICATION = "amplification"
CORRECTION = "correction"
REGIMES = (INJECTION, AMPLIFICATION, CORRECTION)

VARIANTS = ("block", "attention", "moe")
AGGREGATES = ("mean", "median")


def load_probe_defaults() -> dict:
    """
    Load default probe thresholds.

    The file looks like:
      {"tau": 0.05, "kl_fraction": 0.5, "overlap_threshold": 0.3, ...}
    """
    if not PROBE_DEFAULTS_PATH.is_file():
        raise FileNotFoundError(f"Probe defaults not found: {PROBE_DEFAULTS_PATH}")
    with PROBE_DEFAULTS_PATH.open("r", encoding="utf-8") as handle:
        return json.load(handle)


def aggregate_positions(values: np.ndarray, keep: np.ndarray, method: str = "mean") -> np.ndarray:
    """Per-row mean (or median) over entries where `keep` is True; NaN for empty rows."""
    if method not in AGGREGATES:
        raise ParameterError(f"unknown aggregate {method!r}; expected one of {AGGREGATES}")
    out = np.full(values.shape[0], np.nan, dtype=np.float64)
    reduce = np.mean if method == "mean" else np.median
    for i in range(values.shape[0]):
        kept = values[i][keep[i]]
        if kept.size:
            out[i] = float(reduce(kept.astype(np.float64)))
    return out


@dataclass(frozen=True, eq=False)
class CosineProfile:
    turn: int
    variant: str
    layers: tuple[int, ...]
    positions: tuple[int, ...]
    values: np.ndarray          # (layers, positions), in [-1, 1]
    degenerate: np.ndarray      # (layers, positions) bool
    aggregate: np.ndarray       # (layers,), NaN where every position is degenerate
    method: str = "mean"


def _sublayer(trace: ResidualTrace, variant: str, l: int) -> np.ndarray:
    if variant == "block":
        return trace.update(l)
    if variant == "attention":
        return trace.attention(l)
    if variant == "moe":
        return trace.mixture(l)
    raise ParameterError(f"unknown cosine variant {variant!r}; expected one of {VARIANTS}")


def residual_cosine_profile(
    trace: ResidualTrace,
    positions: Iterable[int],
    *,
    variant: str = "block",
    turn: int = 0,
    aggregate: str = "mean",
) -> CosineProfile:
    """cossim(u_l[t], h_l[t]) for every recorded layer and requested position."""
    positions = tuple(int(p) for p in positions)
    rows = trace.rows(positions)
    values = np.zeros((len(trace.layers), len(positions)), dtype=np.float64)
    degenerate = np.zeros_like(values, dtype=bool)
    for i, l in enumerate(trace.layers):
        cos = cosine_similarity(_sublayer(trace, variant, l)[rows], trace.residual_in(l)[rows])
        values[i], degenerate[i] = cos.value, cos.degenerate
    agg = aggregate_positions(values, ~degenerate, aggregate)
    return CosineProfile(turn, variant, trace.layers, positions, values, degenerate, agg, aggregate)


def cosine_profiles(trace: ResidualTrace, positions: Iterable[int], *, turn: int = 0, aggregate: str = "mean") -> dict[str, CosineProfile]:
    positions = tuple(positions)
    return {
        variant: residual_cosine_profile(trace, positions, variant=variant, turn=turn, aggregate=aggregate)
        for variant in VARIANTS
    }


def classify_regime(s: float, tau: float = 0.05) -> str:
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    # NaN marks a layer with no usable positions; it carries no sign
    if math.isnan(s) or abs(s) <= tau:
        return INJECTION
    return AMPLIFICATION if s > tau else CORRECTION


def count_phase_changes(profile: Sequence[float], tau: float = 0.05) -> int:
    """Flips between amplification and correction along depth.

    Injection layers are skipped over, so a crossing through the band counts
    once when the signs on both sides differ.
    """
    signed = [r for r in (classify_regime(float(s), tau) for s in profile) if r != INJECTION]
    return sum(1 for a, b in zip(signed, signed[1:]) if a != b)


def regime_histogram(profile: Sequence[float], tau: float = 0.05) -> dict[str, int]:
    counts = {regime: 0 for regime in REGIMES}
    for s in profile:
        counts[classify_regime(float(s), tau)] += 1
    return counts
