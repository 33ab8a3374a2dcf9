# utils/model.py
"""
Module `model` for depth-trace.

A decoder-only, pre-norm sparse-MoE transformer over numpy tensors:

    a_l     = SelfAttention_l(RMSNorm(h_l))
    h_hat_l = h_l + a_l
    m_l     = MoE_l(RMSNorm(h_hat_l))          (optionally + shared expert)
    h_{l+1} = h_l + (a_l + m_l)

The block update u_l = a_l + m_l is formed once and added to h_l, so the
recorded contribution h_{l+1} - h_l is u_l on the same floating path.

`forward` records a `ResidualTrace` (residual stream, attention and MoE
contributions, final logits) for the layers and positions selected by a
`TraceSpec`. A `BlockSkip` replaces a block's output with its input at a set
of positions; the causal module builds its interventions on it.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import MISSING, dataclass, field, fields
from typing import Iterable, Mapping

import numpy as np

from utils.errors import InputError, ParameterError, SchemaError, ShapeError
from utils.numerics import DTYPE, ensure_finite, matmul, rmsnorm, silu, softmax, topk_rows

logger = logging.getLogger(__name__)

PROJECTION_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    vocab_size: int
    n_experts: int
    top_k: int
    d_ff: int
    has_shared_expert: bool = False
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        counts = ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_head", "n_experts", "top_k", "d_ff")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ParameterError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model != self.n_heads * self.d_head:
            raise ParameterError(
                f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads} * {self.d_head})"
            )
        if self.n_kv_heads > self.n_heads or self.n_heads % self.n_kv_heads:
            raise ParameterError(f"n_kv_heads ({self.n_kv_heads}) must divide n_heads ({self.n_heads})")
        if self.top_k > self.n_experts:
            raise ParameterError(f"top_k ({self.top_k}) must be <= n_experts ({self.n_experts})")
        if self.d_head % 2:
            raise ParameterError(f"d_head must be even for rotary encoding, got {self.d_head}")
        if self.rope_base <= 0 or self.norm_eps <= 0:
            raise ParameterError("rope_base and norm_eps must be positive")

    @classmethod
    def from_dict(cls, data: Mapping, path: str = "config") -> "ModelConfig":
        if not isinstance(data, Mapping):
            raise SchemaError(path, "model config must be an object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise SchemaError(f"{path}.{key}", "unknown model config field")
        required = [f.name for f in fields(cls) if f.default is MISSING]
        for key in sorted(required):
            if key not in data:
                raise SchemaError(f"{path}.{key}", "missing required field")
        values = dict(data)
        for f in fields(cls):
            if f.name not in values:
                continue
            value = values[f.name]
            if f.name == "has_shared_expert":
                if not isinstance(value, bool):
                    raise SchemaError(f"{path}.{f.name}", f"must be true or false, got {value!r}")
            elif f.name in ("rope_base", "norm_eps"):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise SchemaError(f"{path}.{f.name}", f"must be a number, got {value!r}")
                values[f.name] = float(value)
            elif isinstance(value, bool) or not isinstance(value, int):
                raise SchemaError(f"{path}.{f.name}", f"must be an integer, got {value!r}")
        return cls(**values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every tensor name with its shape, in canonical order."""
        d, dh = self.d_model, self.d_head
        shapes: dict[str, tuple[int, ...]] = {"embed": (self.vocab_size, d)}
        for l in range(self.n_layers):
            p = f"layers.{l}"
            shapes[f"{p}.attn.norm"] = (d,)
            shapes[f"{p}.attn.wq"] = (d, self.n_heads * dh)
            shapes[f"{p}.attn.wk"] = (d, self.n_kv_heads * dh)
            shapes[f"{p}.attn.wv"] = (d, self.n_kv_heads * dh)
            shapes[f"{p}.attn.wo"] = (self.n_heads * dh, d)
            shapes[f"{p}.moe.norm"] = (d,)
            shapes[f"{p}.moe.router"] = (d, self.n_experts)
            for i in range(self.n_experts):
                shapes[f"{p}.moe.expert.{i}.gate"] = (d, self.d_ff)
                shapes[f"{p}.moe.expert.{i}.up"] = (d, self.d_ff)
                shapes[f"{p}.moe.expert.{i}.down"] = (self.d_ff, d)
            if self.has_shared_expert:
                shapes[f"{p}.moe.shared.gate"] = (d, self.d_ff)
                shapes[f"{p}.moe.shared.up"] = (d, self.d_ff)
                shapes[f"{p}.moe.shared.down"] = (self.d_ff, d)
        shapes["final_norm"] = (d,)
        shapes["unembed"] = (d, self.vocab_size)
        return shapes


def is_gain(name: str) -> bool:
    return name == "final_norm" or name.endswith(".norm")


@dataclass(frozen=True)
class ExpertWeights:
    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray


@dataclass(frozen=True)
class LayerWeights:
    config: ModelConfig
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    moe_norm: np.ndarray
    router: np.ndarray
    experts: tuple[ExpertWeights, ...]
    shared: ExpertWeights | None


@dataclass(frozen=True, eq=False)
class Weights:
    """Immutable parameter set; tensors are read-only float32 arrays."""

    config: ModelConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.tensor_shapes()
        for name in self.tensors:
            if name not in expected:
                raise ShapeError(f"unexpected tensor {name!r}")
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ShapeError(f"missing tensor {name!r}")
            tensor = self.tensors[name]
            if tuple(tensor.shape) != shape:
                raise ShapeError(f"tensor {name!r} has shape {tuple(tensor.shape)}, expected {shape}")
            ensure_finite(tensor, name)
        frozen = {}
        for name in expected:
            arr = np.array(self.tensors[name], dtype=DTYPE, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def with_tensors(self, updates: Mapping[str, np.ndarray]) -> "Weights":
        merged = dict(self.tensors)
        merged.update(updates)
        return Weights(self.config, merged)

    def layer(self, l: int) -> LayerWeights:
        if not 0 <= l < self.config.n_layers:
            raise ParameterError(f"layer {l} out of range [0, {self.config.n_layers})")
        p = f"layers.{l}"
        t = self.tensors
        experts = tuple(
            ExpertWeights(t[f"{p}.moe.expert.{i}.gate"], t[f"{p}.moe.expert.{i}.up"], t[f"{p}.moe.expert.{i}.down"])
            for i in range(self.config.n_experts)
        )
        shared = None
        if self.config.has_shared_expert:
            shared = ExpertWeights(t[f"{p}.moe.shared.gate"], t[f"{p}.moe.shared.up"], t[f"{p}.moe.shared.down"])
        return LayerWeights(
            config=self.config,
            attn_norm=t[f"{p}.attn.norm"],
            wq=t[f"{p}.attn.wq"],
            wk=t[f"{p}.attn.wk"],
            wv=t[f"{p}.attn.wv"],
            wo=t[f"{p}.attn.wo"],
            moe_norm=t[f"{p}.moe.norm"],
            router=t[f"{p}.moe.router"],
            experts=experts,
            shared=shared,
        )

    def digest(self) -> str:
        """sha256 over the config and every tensor in canonical order."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8"))
        for name in self.config.tensor_shapes():
            h.update(name.encode("utf-8"))
            h.update(self.tensors[name].astype("<f4").tobytes())
        return h.hexdigest()


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    # Philox is counter-based: the stream depends only on (seed, name).
    key = int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def init_random(config: ModelConfig) -> Weights:
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if is_gain(name):
            tensors[name] = np.ones(shape, dtype=DTYPE)
        else:
            draw = _tensor_rng(config.seed, name).standard_normal(shape)
            tensors[name] = (draw * PROJECTION_STD).astype(DTYPE)
    logger.debug("initialised %d tensors from seed %d", len(tensors), config.seed)
    return Weights(config, tensors)


# ---------------------------------------------------------------- sublayers

def rope_tables(n: int, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    angles = np.arange(n, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate-half rotary encoding of x shaped (heads, n, d_head)."""
    half = x.shape[-1] // 2
    x64 = x.astype(np.float64)
    x1, x2 = x64[..., :half], x64[..., half:]
    rotated = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
    return rotated.astype(DTYPE)


def _split_heads(x: np.ndarray, n_heads: int, d_head: int) -> np.ndarray:
    n = x.shape[0]
    return np.ascontiguousarray(x.reshape(n, n_heads, d_head).transpose(1, 0, 2))


def attention_sublayer(lw: LayerWeights, h: np.ndarray) -> np.ndarray:
    """Causal multi-head attention on RMSNorm(h) with rotary Q/K and grouped KV heads."""
    cfg = lw.config
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] != cfg.d_model:
        raise ShapeError(f"attention input must be (n, {cfg.d_model}), got {h.shape}")
    n = h.shape[0]
    x = rmsnorm(h, lw.attn_norm, cfg.norm_eps)
    q = _split_heads(matmul(x, lw.wq), cfg.n_heads, cfg.d_head)
    k = _split_heads(matmul(x, lw.wk), cfg.n_kv_heads, cfg.d_head)
    v = _split_heads(matmul(x, lw.wv), cfg.n_kv_heads, cfg.d_head)
    cos, sin = rope_tables(n, cfg.d_head, cfg.rope_base)
    q = apply_rope(q, cos, sin)
    k = apply_rope(k, cos, sin)

    group = cfg.n_heads // cfg.n_kv_heads
    scale = DTYPE(1.0 / np.sqrt(cfg.d_head))
    causal = np.tril(np.ones((n, n), dtype=bool))
    heads = []
    for head in range(cfg.n_heads):
        kv = head // group
        scores = matmul(q[head], np.ascontiguousarray(k[kv].T)) * scale
        weights = softmax(scores, mask=causal)
        heads.append(matmul(weights, v[kv]))
    return matmul(np.concatenate(heads, axis=-1), lw.wo)


def expert_ffn(x: np.ndarray, expert: ExpertWeights) -> np.ndarray:
    """down(silu(x @ gate) * (x @ up))"""
    return matmul(silu(matmul(x, expert.gate)) * matmul(x, expert.up), expert.down)


@dataclass(frozen=True)
class Routing:
    x_tilde: np.ndarray      # normalised MoE input, (n, d_model)
    probs: np.ndarray        # full router softmax, (n, E)
    selected: np.ndarray     # bool (n, E), exactly K True per row
    gates: np.ndarray        # renormalised gate per selected expert, 0 elsewhere


def route(lw: LayerWeights, h_hat: np.ndarray) -> Routing:
    cfg = lw.config
    x = rmsnorm(h_hat, lw.moe_norm, cfg.norm_eps)
    probs = softmax(matmul(x, lw.router))
    idx = topk_rows(probs, cfg.top_k)
    n = probs.shape[0]
    selected = np.zeros_like(probs, dtype=bool)
    selected[np.arange(n)[:, None], idx] = True
    chosen = np.where(selected, probs.astype(np.float64), 0.0)
    gates = (chosen / np.sum(chosen, axis=-1, keepdims=True)).astype(DTYPE)
    return Routing(x, probs, selected, gates)


def moe_sublayer(lw: LayerWeights, h_hat: np.ndarray) -> np.ndarray:
    """Top-K routed gated-linear experts, plus the shared expert when configured."""
    cfg = lw.config
    if h_hat.ndim != 2 or h_hat.shape[1] != cfg.d_model:
        raise ShapeError(f"moe input must be (n, {cfg.d_model}), got {h_hat.shape}")
    routing = route(lw, h_hat)
    m = np.zeros_like(h_hat, dtype=DTYPE)
    # experts accumulate in ascending index order
    for i, expert in enumerate(lw.experts):
        rows = np.flatnonzero(routing.selected[:, i])
        if rows.size == 0:
            continue
        out = expert_ffn(routing.x_tilde[rows], expert)
        m[rows] = m[rows] + routing.gates[rows, i][:, None] * out
    if lw.shared is not None:
        m = m + expert_ffn(routing.x_tilde, lw.shared)
    return ensure_finite(m, "moe output")


def readout(h: np.ndarray, final_norm: np.ndarray, unembed: np.ndarray, eps: float) -> np.ndarray:
    return matmul(rmsnorm(h, final_norm, eps), unembed)


# ---------------------------------------------------------------- forward

@dataclass(frozen=True)
class TraceSpec:
    """Which layers and positions to record; None means all."""

    layers: tuple[int, ...] | None = None
    positions: tuple[int, ...] | None = None

    def resolve(self, n_layers: int, n: int) -> tuple[tuple[int, ...], np.ndarray]:
        layers = tuple(range(n_layers)) if self.layers is None else tuple(sorted(set(self.layers)))
        for l in layers:
            if not 0 <= l < n_layers:
                raise ParameterError(f"trace layer {l} out of range [0, {n_layers})")
        if self.positions is None:
            positions = np.arange(n, dtype=np.int64)
        else:
            positions = np.array(sorted(set(int(p) for p in self.positions)), dtype=np.int64)
            if positions.size and (positions[0] < 0 or positions[-1] >= n):
                raise ParameterError(f"trace positions must lie in [0, {n})")
        return layers, positions


@dataclass(frozen=True)
class BlockSkip:
    """Block `layer` contributes nothing at positions where `mask` is True."""

    layer: int
    mask: np.ndarray

    @classmethod
    def from_position(cls, layer: int, p: int, n: int) -> "BlockSkip":
        return cls(layer, np.arange(n) >= p)

    @classmethod
    def up_to_position(cls, layer: int, t: int, n: int) -> "BlockSkip":
        return cls(layer, np.arange(n) <= t)


@dataclass(frozen=True, eq=False)
class ResidualTrace:
    n_layers: int
    n_tokens: int
    positions: np.ndarray
    layers: tuple[int, ...]
    residual: dict[int, np.ndarray]     # h_l rows, for recorded l and l + 1
    attn: dict[int, np.ndarray]         # a_l rows
    moe: dict[int, np.ndarray]          # m_l rows
    final_logits: np.ndarray            # logits rows
    norm_eps: float
    turn_offsets: tuple[int, ...] = ()
    _row_of: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row_of.update({int(p): i for i, p in enumerate(self.positions)})

    def rows(self, positions: Iterable[int]) -> np.ndarray:
        out = []
        for p in positions:
            if int(p) not in self._row_of:
                raise ParameterError(f"position {p} was not recorded")
            out.append(self._row_of[int(p)])
        return np.array(out, dtype=np.int64)

    def _layer(self, table: dict[int, np.ndarray], l: int, what: str) -> np.ndarray:
        if l not in table:
            raise ParameterError(f"{what} for layer {l} was not recorded")
        return table[l]

    def residual_in(self, l: int) -> np.ndarray:
        return self._layer(self.residual, l, "residual")

    def residual_out(self, l: int) -> np.ndarray:
        return self._layer(self.residual, l + 1, "residual")

    def attention(self, l: int) -> np.ndarray:
        return self._layer(self.attn, l, "attention contribution")

    def mixture(self, l: int) -> np.ndarray:
        return self._layer(self.moe, l, "moe contribution")

    def update(self, l: int) -> np.ndarray:
        """u_l = a_l + m_l."""
        return self.attention(l) + self.mixture(l)

    def contribution(self, l: int) -> np.ndarray:
        """C_l = h_{l+1} - h_l, which is u_l on the forward's floating path."""
        return self.update(l)


def embed(weights: Weights, tokens: Iterable[int]) -> np.ndarray:
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("forward needs at least one token")
    bad = ids[(ids < 0) | (ids >= weights.config.vocab_size)]
    if bad.size:
        raise InputError(f"token id {int(bad[0])} outside vocabulary of {weights.config.vocab_size}")
    return np.array(weights["embed"][ids], dtype=DTYPE)


def forward_from(
    weights: Weights,
    h: np.ndarray,
    start_layer: int = 0,
    trace_spec: TraceSpec | None = None,
    *,
    skip: BlockSkip | None = None,
    turn_offsets: tuple[int, ...] = (),
) -> tuple[np.ndarray, ResidualTrace]:
    """Run blocks start_layer..L-1 on residual h, then the read-out.

    Layers below start_layer are not recorded. `forward` is this function
    with start_layer = 0 on the embeddings, so resuming from a recorded h_s
    reproduces a full pass bit for bit.
    """
    cfg = weights.config
    n = h.shape[0]
    if not 0 <= start_layer < cfg.n_layers:
        raise ParameterError(f"start layer {start_layer} out of range [0, {cfg.n_layers})")
    if skip is not None:
        if not 0 <= skip.layer < cfg.n_layers:
            raise ParameterError(f"skip layer {skip.layer} out of range [0, {cfg.n_layers})")
        if skip.mask.shape != (n,):
            raise ShapeError(f"skip mask must have shape ({n},), got {skip.mask.shape}")
    layers, positions = (trace_spec or TraceSpec()).resolve(cfg.n_layers, n)
    recorded = {l for l in layers if l >= start_layer}

    residual: dict[int, np.ndarray] = {}
    attn: dict[int, np.ndarray] = {}
    moe: dict[int, np.ndarray] = {}
    for l in range(start_layer, cfg.n_layers):
        lw = weights.layer(l)
        a = attention_sublayer(lw, h)
        m = moe_sublayer(lw, h + a)
        if skip is not None and skip.layer == l:
            a = np.where(skip.mask[:, None], DTYPE(0.0), a)
            m = np.where(skip.mask[:, None], DTYPE(0.0), m)
        u = a + m
        h_next = h + u
        if skip is not None and skip.layer == l:
            h_next = np.where(skip.mask[:, None], h, h_next)
        if l in recorded:
            residual[l] = h[positions]
            residual[l + 1] = h_next[positions]
            attn[l] = a[positions]
            moe[l] = m[positions]
        h = h_next

    logits = readout(h, weights["final_norm"], weights["unembed"], cfg.norm_eps)
    trace = ResidualTrace(
        n_layers=cfg.n_layers,
        n_tokens=n,
        positions=positions,
        layers=tuple(sorted(recorded)),
        residual=residual,
        attn=attn,
        moe=moe,
        final_logits=logits[positions],
        norm_eps=cfg.norm_eps,
        turn_offsets=tuple(turn_offsets),
    )
    return logits, trace


def forward(
    weights: Weights,
    tokens: Iterable[int],
    trace_spec: TraceSpec | None = None,
    *,
    skip: BlockSkip | None = None,
    turn_offsets: tuple[int, ...] = (),
) -> tuple[np.ndarray, ResidualTrace]:
    """Full pass: embed, L blocks, final norm, unembed."""
    return forward_from(weights, embed(weights, tokens), 0, trace_spec, skip=skip, turn_offsets=turn_offsets)
