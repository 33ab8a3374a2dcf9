# utils/logit_lens.py
"""
Module `logit_lens` for depth-trace.

Decodes the residual after block l through the model's own final RMSNorm
and unembedding, then compares that provisional distribution with the
model's output distribution by KL divergence and top-k token overlap.

The read-out is applied to the whole recorded row block, the same block the
forward pass decodes, so the lens at the last layer reproduces the output
distribution exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from utils.errors import ParameterError
from utils.model import ResidualTrace, readout
from utils.numerics import kl_divergence, softmax, topk_rows
from utils.probes import aggregate_positions

logger = logging.getLogger(__name__)

KL_DIRECTIONS = ("final_lens", "lens_final")


def lens_logits(trace: ResidualTrace, final_norm: np.ndarray, unembed: np.ndarray, l: int) -> np.ndarray:
    """Logits of every recorded position read out of h_{l+1}."""
    return readout(trace.residual_out(l), final_norm, unembed, trace.norm_eps)


def logit_lens(trace: ResidualTrace, final_norm: np.ndarray, unembed: np.ndarray, l: int, position: int) -> np.ndarray:
    """softmax(unembed(final_rmsnorm(h_{l+1}[position])))"""
    row = trace.rows([position])[0]
    return softmax(lens_logits(trace, final_norm, unembed, l))[row]


def top_k_overlap(p: np.ndarray, q: np.ndarray, k: int = 5) -> np.ndarray:
    """|topk(p) ∩ topk(q)| / k per row; ties go to the lowest token id."""
    top_p = topk_rows(p, k)
    top_q = topk_rows(q, k)
    shared = [len(set(a.tolist()) & set(b.tolist())) for a, b in zip(top_p, top_q)]
    return np.array(shared, dtype=np.float64) / k


@dataclass(frozen=True, eq=False)
class LensCurves:
    layers: tuple[int, ...]
    positions: tuple[int, ...]
    kl: np.ndarray                  # (layers,)
    overlap: np.ndarray             # (layers,)
    kl_by_position: np.ndarray      # (layers, positions)
    overlap_by_position: np.ndarray # (layers, positions), multiples of 1/top_k
    direction: str = "final_lens"
    top_k: int = 5
    method: str = "mean"


def lens_curves(
    trace: ResidualTrace,
    positions: Iterable[int],
    final_norm: np.ndarray,
    unembed: np.ndarray,
    *,
    top_k: int = 5,
    direction: str = "final_lens",
    aggregate: str = "mean",
) -> LensCurves:
    """KL and top-k overlap against the output distribution for every recorded layer."""
    if direction not in KL_DIRECTIONS:
        raise ParameterError(f"unknown KL direction {direction!r}; expected one of {KL_DIRECTIONS}")
    positions = tuple(int(p) for p in positions)
    rows = trace.rows(positions)
    final = softmax(trace.final_logits)[rows]
    kl = np.zeros((len(trace.layers), len(positions)), dtype=np.float64)
    overlap = np.zeros_like(kl)
    for i, l in enumerate(trace.layers):
        lens = softmax(lens_logits(trace, final_norm, unembed, l))[rows]
        pair = (final, lens) if direction == "final_lens" else (lens, final)
        kl[i] = np.maximum(np.atleast_1d(kl_divergence(*pair)), 0.0)
        overlap[i] = top_k_overlap(lens, final, top_k)
    keep = np.ones_like(kl, dtype=bool)
    return LensCurves(
        layers=trace.layers,
        positions=positions,
        kl=aggregate_positions(kl, keep, aggregate),
        overlap=aggregate_positions(overlap, keep, aggregate),
        kl_by_position=kl,
        overlap_by_position=overlap,
        direction=direction,
        top_k=top_k,
        method=aggregate,
    )
