# utils/effective_depth.py
"""
Module `effective_depth` for depth-trace.

Three ways to read off the layer at which a model's computation has
matured, and the normalised depth ratio used to compare models of different
depth:

    cosine   1 + the last layer whose residual cosine is negative
    kl       first layer past the peak whose lens KL falls to half its maximum
    overlap  first layer whose top-5 lens overlap exceeds 0.3

Ratios are kept at full precision; two decimals are only applied for display.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from utils.errors import ParameterError, ReportError

logger = logging.getLogger(__name__)

CRITERIA = ("cosine", "kl", "overlap")
CONVENTIONS = ("ed", "ed-plus-1")
CONVENTION_ALIASES = {
    "ed": "ed",
    "ed_over_L": "ed",
    "ed-plus-1": "ed-plus-1",
    "ed_plus1_over_L": "ed-plus-1",
}

NEVER_NEGATIVE = "never-negative"
NEVER = "never"
DEGENERATE = "degenerate"
BOUNDARY = "boundary"


class DepthResult(NamedTuple):
    layer: int
    flag: str | None = None


def effective_depth_cosine(profile: Sequence[float]) -> DepthResult:
    """ED = 1 + max{l : S(l) < 0}; 0 flagged never-negative when no layer is negative."""
    negative = [l for l, s in enumerate(profile) if not math.isnan(float(s)) and float(s) < 0]
    if not negative:
        return DepthResult(0, NEVER_NEGATIVE)
    ed = negative[-1] + 1
    # a negative last layer puts ED on L itself
    return DepthResult(ed, BOUNDARY if ed == len(profile) else None)


def effective_depth_kl(curve: Sequence[float], fraction: float = 0.5) -> DepthResult:
    """Smallest l at or after the KL peak with KL(l) <= fraction * max KL."""
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("effective_depth_kl needs a non-empty curve")
    if np.any(values < 0):
        raise ParameterError("KL curve has negative values")
    if not 0 < fraction < 1:
        raise ParameterError(f"kl fraction must lie in (0, 1), got {fraction}")
    peak = float(np.max(values))
    if peak == 0.0:
        return DepthResult(0, DEGENERATE)
    start = int(np.argmax(values))
    hits = np.flatnonzero(values[start:] <= fraction * peak)
    if hits.size == 0:
        return DepthResult(values.size - 1, NEVER)
    return DepthResult(start + int(hits[0]))


def effective_depth_overlap(curve: Sequence[float], threshold: float = 0.3) -> DepthResult:
    """Smallest l with overlap(l) > threshold (strict)."""
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("effective_depth_overlap needs a non-empty curve")
    hits = np.flatnonzero(values > threshold)
    if hits.size == 0:
        return DepthResult(values.size - 1, NEVER)
    return DepthResult(int(hits[0]))


def normalize_convention(convention: str) -> str:
    if convention not in CONVENTION_ALIASES:
        raise ParameterError(f"unknown ratio convention {convention!r}; expected one of {CONVENTIONS}")
    return CONVENTION_ALIASES[convention]


def depth_ratio(ed: int, n_layers: int, convention: str = "ed") -> float:
    """ED/L, or (ED+1)/L under the "ed-plus-1" convention."""
    convention = normalize_convention(convention)
    if n_layers < 1:
        raise ParameterError(f"layer count must be >= 1, got {n_layers}")
    if not 0 <= ed <= n_layers:
        raise ParameterError(f"effective depth {ed} outside [0, {n_layers}]")
    return (ed + (1 if convention == "ed-plus-1" else 0)) / n_layers


def display_ratio(ratio: float) -> str:
    return f"{ratio:.2f}"


@dataclass(frozen=True)
class RatioCell:
    label: str
    ed: int
    n_layers: int
    ratio: float


def reconcile_ratios(cells: Iterable[RatioCell], tolerance: float = 0.005) -> dict[str, list[str]]:
    """Labels of tabulated cells each convention fails to reproduce after 2-decimal rounding."""
    failures: dict[str, list[str]] = {c: [] for c in CONVENTIONS}
    for cell in cells:
        for convention in CONVENTIONS:
            shown = float(display_ratio(depth_ratio(cell.ed, cell.n_layers, convention)))
            if abs(shown - cell.ratio) > tolerance:
                failures[convention].append(cell.label)
    for convention, failed in failures.items():
        if failed:
            logger.info("convention %s misses %d tabulated cells", convention, len(failed))
    return failures


def average_curves(curves: Sequence[Sequence[float]]) -> np.ndarray:
    """Layer-wise mean of several curves, ignoring NaN; NaN where every curve is NaN."""
    if not curves:
        raise ReportError("no curves to average")
    stack = np.asarray([np.asarray(c, dtype=np.float64) for c in curves])
    valid = ~np.isnan(stack)
    counts = valid.sum(axis=0)
    totals = np.where(valid, stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)


@dataclass(frozen=True)
class EffectiveDepthReport:
    model: str
    domain: str
    n_layers: int
    convention: str
    ed: dict[str, int]
    flags: dict[str, str | None]
    ratios: dict[str, float]
    alternate_ratios: dict[str, float]
    cells: int = 1
    convention_mismatch: tuple[str, ...] = field(default=())

    @property
    def gap_kl(self) -> float:
        return self.ratios["kl"] - self.ratios["cosine"]

    @property
    def gap_overlap(self) -> float:
        return self.ratios["overlap"] - self.ratios["cosine"]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "domain": self.domain,
            "n_layers": self.n_layers,
            "convention": self.convention,
            "ed": dict(self.ed),
            "flags": dict(self.flags),
            "ratios": dict(self.ratios),
            "alternate_ratios": dict(self.alternate_ratios),
            "gap_kl": self.gap_kl,
            "gap_overlap": self.gap_overlap,
            "cells": self.cells,
            "convention_mismatch": list(self.convention_mismatch),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EffectiveDepthReport":
        try:
            return build_report(
                data["model"],
                data["domain"],
                int(data["n_layers"]),
                {c: (int(data["ed"][c]), data.get("flags", {}).get(c)) for c in CRITERIA},
                convention=data.get("convention", "ed"),
                cells=int(data.get("cells", 1)),
            )
        except (KeyError, TypeError, ValueError) as error:
            raise ReportError(f"malformed effective depth record: {error}") from error


def build_report(
    model: str,
    domain: str,
    n_layers: int,
    depths: dict[str, DepthResult | tuple[int, str | None]],
    *,
    convention: str = "ed",
    cells: int = 1,
) -> EffectiveDepthReport:
    convention = normalize_convention(convention)
    other = CONVENTIONS[1] if convention == CONVENTIONS[0] else CONVENTIONS[0]
    ed = {c: int(depths[c][0]) for c in CRITERIA}
    flags = {c: depths[c][1] for c in CRITERIA}
    ratios = {c: depth_ratio(ed[c], n_layers, convention) for c in CRITERIA}
    alternate = {c: depth_ratio(ed[c], n_layers, other) for c in CRITERIA}
    mismatch = tuple(c for c in CRITERIA if display_ratio(ratios[c]) != display_ratio(alternate[c]))
    for criterion, flag in flags.items():
        if flag:
            logger.info("%s/%s: %s effective depth flagged %s", model, domain, criterion, flag)
    return EffectiveDepthReport(model, domain, n_layers, convention, ed, flags, ratios, alternate, cells, mismatch)


def effective_depth_report(
    model: str,
    domain: str,
    cosine_profile: Sequence[float],
    kl_curve: Sequence[float],
    overlap_curve: Sequence[float],
    *,
    convention: str = "ed",
    kl_fraction: float = 0.5,
    overlap_threshold: float = 0.3,
    cells: int = 1,
) -> EffectiveDepthReport:
    """Apply all three criteria to per-layer curves of one (model, domain)."""
    n_layers = len(cosine_profile)
    if len(kl_curve) != n_layers or len(overlap_curve) != n_layers:
        raise ReportError("cosine, KL and overlap curves must cover the same layers")
    depths = {
        "cosine": effective_depth_cosine(cosine_profile),
        "kl": effective_depth_kl(kl_curve, kl_fraction),
        "overlap": effective_depth_overlap(overlap_curve, overlap_threshold),
    }
    return build_report(model, domain, n_layers, depths, convention=convention, cells=cells)
