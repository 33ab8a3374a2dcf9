# utils/causal.py
"""
Module `causal` for depth-trace.

Layer-skipping interventions. Skipping block s from position p replaces
h_{s+1}[p:] with h_s[p:] and recomputes every later block, so attention at
positions >= p reads the modified suffix and the untouched prefix.

Two measurements are built on it:

- the Future Effect E(s, l): the largest relative change, over candidate
  positions p, in block l's contribution on the suffix [p:] when block s is
  skipped from p onward;
- the Logit Change Norm D(s): how far the logits of positions after a pivot
  t_s move when block s is skipped for every position up to the pivot.

Interventions resume from the baseline residual h_s instead of re-running
the blocks below s; those blocks are untouched by the skip, so the result is
the same as a full recompute.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from utils.errors import InputError, ParameterError
from utils.model import BlockSkip, ResidualTrace, Weights, forward, forward_from
from utils.numerics import ACC_DTYPE, kl_divergence, l2_norm, softmax
from utils.trajectory import TokenizedTrajectory, prefix_for_turn

logger = logging.getLogger(__name__)

# ‖C_l‖ below this makes E(s, l) undefined for that candidate position
DEGENERATE_NORM = 1e-10
LOGIT_METRICS = ("l2", "kl")


# ---------------------------------------------------------------- policies

@dataclass(frozen=True)
class PositionPolicy:
    """Candidate positions: turn boundaries, every k-th token, or a fixed list."""

    kind: str = "boundaries"
    stride: int = 0
    positions: tuple[int, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "PositionPolicy":
        text = str(text).strip()
        if text in ("boundaries", "turn_boundaries"):
            return cls("boundaries")
        kind, _, arg = text.partition(":")
        if kind == "stride":
            try:
                k = int(arg)
            except ValueError:
                raise InputError(f"bad stride in position policy {text!r}") from None
            if k < 1:
                raise InputError(f"stride must be >= 1 in position policy {text!r}")
            return cls("stride", stride=k)
        if kind == "list":
            try:
                positions = tuple(int(p) for p in arg.split(",") if p.strip())
            except ValueError:
                raise InputError(f"bad position list in policy {text!r}") from None
            if not positions:
                raise InputError(f"empty position list in policy {text!r}")
            return cls("list", positions=positions)
        raise InputError(f"unknown position policy {text!r}; use boundaries, stride:K or list:p1,p2")

    def __str__(self) -> str:
        if self.kind == "stride":
            return f"stride:{self.stride}"
        if self.kind == "list":
            return "list:" + ",".join(str(p) for p in self.positions)
        return "boundaries"

    def candidates(self, n: int, turn_offsets: Sequence[int] = ()) -> tuple[int, ...]:
        """Sorted candidate positions inside a sequence of n tokens."""
        if self.kind == "stride":
            return tuple(range(0, n, self.stride))
        if self.kind == "list":
            bad = [p for p in self.positions if not 0 <= p < n]
            if bad:
                raise ParameterError(f"positions {bad} outside [0, {n})")
            return tuple(sorted(set(self.positions)))
        boundaries = tuple(offset - 1 for offset in turn_offsets if offset <= n)
        return boundaries or (n - 1,)


def resolve_pivot(tok: TokenizedTrajectory, r: int, pivot: str | int = "previous_turn") -> int:
    """t_s for turn r: final token of turn r-1, the midpoint, or an explicit index."""
    n = tok.turn_offsets[r - 1] if 1 <= r <= tok.n_turns else 0
    if n == 0:
        raise ParameterError(f"turn {r} out of range [1, {tok.n_turns}]")
    if isinstance(pivot, int) and not isinstance(pivot, bool):
        return pivot
    if pivot == "previous_turn" and r > 1:
        return tok.boundary(r - 1)
    if pivot in ("previous_turn", "midpoint"):
        return max(0, n // 2 - 1)
    raise InputError(f"unknown pivot {pivot!r}; use previous_turn, midpoint or an index")


# ---------------------------------------------------------------- skipping

def _check_layer(weights: Weights, s: int) -> None:
    if not 0 <= s < weights.config.n_layers:
        raise ParameterError(f"skip layer {s} out of range [0, {weights.config.n_layers})")


def baseline_trace(weights: Weights, tokens: Sequence[int]) -> ResidualTrace:
    """Full trace (all layers, all positions) the interventions resume from."""
    _, trace = forward(weights, tokens)
    return trace


def _resume_with_skip(weights: Weights, baseline: ResidualTrace, skip: BlockSkip) -> tuple[np.ndarray, ResidualTrace]:
    if baseline.positions.size != baseline.n_tokens or skip.layer not in baseline.layers:
        raise ParameterError("baseline trace must record every layer and position")
    h_s = np.array(baseline.residual_in(skip.layer))
    return forward_from(weights, h_s, skip.layer, skip=skip, turn_offsets=baseline.turn_offsets)


def forward_with_skip(
    weights: Weights,
    tokens: Sequence[int],
    s: int,
    p: int,
    *,
    baseline: ResidualTrace | None = None,
) -> tuple[np.ndarray, ResidualTrace]:
    """Forward pass with block s contributing nothing at positions >= p.

    Without a baseline this is a full recompute. With one, blocks below s
    are taken from it and the returned trace starts at layer s.
    """
    tokens = list(tokens)
    n = len(tokens)
    _check_layer(weights, s)
    if not 0 <= p < n:
        raise ParameterError(f"skip position {p} out of range [0, {n})")
    skip = BlockSkip.from_position(s, p, n)
    if baseline is None:
        return forward(weights, tokens, skip=skip)
    return _resume_with_skip(weights, baseline, skip)


# ---------------------------------------------------------------- future effect

@dataclass(frozen=True, eq=False)
class FutureEffectRow:
    skipped: int
    values: np.ndarray          # float64 (L,), NaN where undefined
    argmax: np.ndarray          # int64 (L,), -1 where undefined
    degenerate: np.ndarray      # bool (L,), True where every candidate had ‖C_l‖ < DEGENERATE_NORM


def _relative_changes(baseline: ResidualTrace, intervened: ResidualTrace, s: int, p: int) -> dict[int, float | None]:
    changes: dict[int, float | None] = {}
    for l in range(s + 1, baseline.n_layers):
        c = baseline.contribution(l)[p:]
        c_tilde = intervened.contribution(l)[p:]
        denominator = l2_norm(c)
        if denominator < DEGENERATE_NORM:
            changes[l] = None
            continue
        diff = c.astype(ACC_DTYPE) - c_tilde.astype(ACC_DTYPE)
        changes[l] = float(np.sqrt(np.sum(diff * diff))) / denominator
    return changes


def future_effect_row(
    weights: Weights,
    tokens: Sequence[int],
    s: int,
    positions: Iterable[int],
    *,
    baseline: ResidualTrace | None = None,
    workers: int = 1,
) -> FutureEffectRow:
    """E(s, l) for every l > s, maximised over the candidate positions."""
    tokens = list(tokens)
    n_layers = weights.config.n_layers
    positions = sorted(set(int(p) for p in positions))
    if not positions:
        raise ParameterError("future_effect_row needs at least one candidate position")
    if not 0 <= s < n_layers - 1:
        raise ParameterError(f"skipped layer {s} must lie in [0, {n_layers - 1})")
    for p in positions:
        if not 0 <= p < len(tokens):
            raise ParameterError(f"candidate position {p} out of range [0, {len(tokens)})")
    if baseline is None:
        baseline = baseline_trace(weights, tokens)

    def run(p: int) -> dict[int, float | None]:
        _, intervened = forward_with_skip(weights, tokens, s, p, baseline=baseline)
        return _relative_changes(baseline, intervened, s, p)

    if workers > 1 and len(positions) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_position = list(pool.map(run, positions))
    else:
        per_position = [run(p) for p in positions]

    values = np.full(n_layers, np.nan, dtype=np.float64)
    argmax = np.full(n_layers, -1, dtype=np.int64)
    degenerate = np.zeros(n_layers, dtype=bool)
    for l in range(s + 1, n_layers):
        # positions ascend, so strict > keeps the earliest maximiser
        for p, changes in zip(positions, per_position):
            value = changes[l]
            if value is not None and (argmax[l] < 0 or value > values[l]):
                values[l], argmax[l] = value, p
        if argmax[l] < 0:
            degenerate[l] = True
            logger.debug("E(%d, %d) is degenerate: zero contribution at every candidate", s, l)
    return FutureEffectRow(s, values, argmax, degenerate)


@dataclass(frozen=True, eq=False)
class FutureEffectMap:
    turn: int
    n_layers: int
    values: np.ndarray          # (L, L), NaN outside l > s and for degenerate entries
    argmax: np.ndarray          # (L, L), -1 where undefined
    degenerate: np.ndarray      # (L, L) bool
    policy: str
    positions: tuple[int, ...]

    def entry(self, s: int, l: int) -> float | None:
        if l <= s or self.degenerate[s, l]:
            return None
        return float(self.values[s, l])

    def entries(self):
        """(s, l, value or None, argmax p or None, flag) for every l > s."""
        for s in range(self.n_layers):
            for l in range(s + 1, self.n_layers):
                if self.degenerate[s, l]:
                    yield s, l, None, None, "degenerate"
                else:
                    yield s, l, float(self.values[s, l]), int(self.argmax[s, l]), ""

    def defined_count(self) -> int:
        return int(np.sum(~np.isnan(self.values)))


def future_effect_map(
    weights: Weights,
    tok: TokenizedTrajectory,
    r: int,
    policy: PositionPolicy | str = "boundaries",
    *,
    baseline: ResidualTrace | None = None,
    workers: int = 1,
) -> FutureEffectMap:
    if isinstance(policy, str):
        policy = PositionPolicy.parse(policy)
    tokens = prefix_for_turn(tok, r)
    positions = policy.candidates(len(tokens), tok.turn_offsets)
    if baseline is None:
        baseline = baseline_trace(weights, tokens)
    n_layers = weights.config.n_layers
    values = np.full((n_layers, n_layers), np.nan, dtype=np.float64)
    argmax = np.full((n_layers, n_layers), -1, dtype=np.int64)
    degenerate = np.zeros((n_layers, n_layers), dtype=bool)
    for s in range(n_layers - 1):
        row = future_effect_row(weights, tokens, s, positions, baseline=baseline, workers=workers)
        values[s], argmax[s], degenerate[s] = row.values, row.argmax, row.degenerate
    logger.debug("future effect map for turn %d over %d candidate positions", r, len(positions))
    return FutureEffectMap(r, n_layers, values, argmax, degenerate, str(policy), positions)


# ---------------------------------------------------------------- logit change

@dataclass(frozen=True)
class LogitChangeProfile:
    turn: int
    pivot: int
    metric: str
    values: tuple[float, ...]   # D(s) for s = 0..L-1


def _logit_change(baseline_logits: np.ndarray, intervened_logits: np.ndarray, t_s: int, metric: str) -> float:
    base = baseline_logits[t_s + 1:]
    other = intervened_logits[t_s + 1:]
    if metric == "kl":
        value = float(np.mean(kl_divergence(softmax(base), softmax(other))))
    else:
        diff = base.astype(ACC_DTYPE) - other.astype(ACC_DTYPE)
        value = float(np.mean(np.sqrt(np.sum(diff * diff, axis=-1))))
    return max(value, 0.0)


def logit_change_norm(
    weights: Weights,
    tokens: Sequence[int],
    s: int,
    t_s: int,
    *,
    metric: str = "l2",
    baseline: ResidualTrace | None = None,
) -> float:
    """Mean over t > t_s of ‖logits_t - logits~_t‖ with block s skipped at t <= t_s.

    metric="kl" averages KL(baseline ‖ intervened) instead.
    """
    tokens = list(tokens)
    n = len(tokens)
    _check_layer(weights, s)
    if metric not in LOGIT_METRICS:
        raise ParameterError(f"unknown logit change metric {metric!r}; expected one of {LOGIT_METRICS}")
    if not 0 <= t_s < n - 1:
        raise ParameterError(f"pivot {t_s} leaves no future positions in a sequence of {n}")
    skip = BlockSkip.up_to_position(s, t_s, n)
    if baseline is None:
        baseline_logits, _ = forward(weights, tokens)
        intervened_logits, _ = forward(weights, tokens, skip=skip)
    else:
        baseline_logits = baseline.final_logits
        intervened_logits, _ = _resume_with_skip(weights, baseline, skip)
    return _logit_change(baseline_logits, intervened_logits, t_s, metric)


def logit_change_profile(
    weights: Weights,
    tok: TokenizedTrajectory,
    r: int,
    pivot: str | int = "previous_turn",
    *,
    metric: str = "l2",
    baseline: ResidualTrace | None = None,
    workers: int = 1,
) -> LogitChangeProfile:
    tokens = prefix_for_turn(tok, r)
    t_s = resolve_pivot(tok, r, pivot)
    if baseline is None:
        baseline = baseline_trace(weights, tokens)

    def run(s: int) -> float:
        return logit_change_norm(weights, tokens, s, t_s, metric=metric, baseline=baseline)

    layers = range(weights.config.n_layers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = tuple(pool.map(run, layers))
    else:
        values = tuple(run(s) for s in layers)
    return LogitChangeProfile(r, t_s, metric, values)
