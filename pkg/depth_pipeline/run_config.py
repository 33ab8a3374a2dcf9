"""Load, validate and digest the JSON run configuration of an analysis."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict

from utils.causal import PositionPolicy
from utils.effective_depth import CONVENTION_ALIASES
from utils.errors import DepthError, InputError, SchemaError
from utils.logit_lens import KL_DIRECTIONS
from utils.model import ModelConfig, Weights, init_random
from utils.probes import AGGREGATES, load_probe_defaults
from utils.storage import canonical_json
from utils.trajectory import DOMAINS
from utils.weights_io import load_weights

REPO_ROOT = Path(__file__).resolve().parents[1]
MODEL_PRESETS_PATH = REPO_ROOT / "config" / "model_presets.json"

PIVOT_NAMES = ("previous_turn", "midpoint")
LOGIT_METRICS = ("l2", "kl")


def resolve_path(base_dir: Path, relative_path: str) -> Path:
    path = Path(relative_path)
    if path.is_absolute():
        return path.resolve()
    return (base_dir / path).resolve()


def load_model_presets() -> Dict[str, Any]:
    if not MODEL_PRESETS_PATH.is_file():
        raise FileNotFoundError(f"Missing model presets file: {MODEL_PRESETS_PATH}")
    with MODEL_PRESETS_PATH.open("r", encoding="utf-8") as handle:
        return json.load(handle)


@dataclass(frozen=True)
class ModelSpec:
    label: str
    weights: str | None = None
    preset: str | None = None
    config: Dict[str, Any] | None = None
    seed: int | None = None

    def to_dict(self, base_dir: Path) -> Dict[str, Any]:
        data: Dict[str, Any] = {"label": self.label}
        if self.weights is not None:
            data["weights"] = str(resolve_path(base_dir, self.weights))
        if self.preset is not None:
            data["preset"] = self.preset
        if self.config is not None:
            data["config"] = dict(self.config)
        if self.seed is not None:
            data["seed"] = self.seed
        return data


@dataclass(frozen=True)
class SynthSpec:
    domain: str
    n_turns: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.domain}_{self.n_turns}t_s{self.seed}"


@dataclass(frozen=True)
class RunConfig:
    models: tuple[ModelSpec, ...]
    trajectory_paths: tuple[str, ...] = ()
    synthesize: tuple[SynthSpec, ...] = ()
    turns: str | tuple[int, ...] = "all"
    position_policy: str = "boundaries"
    probe_policy: str = "boundaries"
    pivot: str | int = "previous_turn"
    logit_change_metric: str = "l2"
    tau: float = 0.05
    kl_fraction: float = 0.5
    overlap_threshold: float = 0.3
    overlap_top_k: int = 5
    kl_direction: str = "final_lens"
    aggregate: str = "mean"
    strong_effect: float = 0.1
    ratio_convention: str = "ed"
    output_dir: str = "runs/latest"
    workers: int = 1
    record_timings: bool = False
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def out_path(self) -> Path:
        return resolve_path(self.base_dir, self.output_dir)

    def with_overrides(self, **changes: Any) -> "RunConfig":
        """Apply command-line overrides; None means keep the file's value."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        """Canonical form: every path resolved, so a persisted copy re-runs identically."""
        return {
            "models": [m.to_dict(self.base_dir) for m in self.models],
            "trajectories": {
                "paths": [str(resolve_path(self.base_dir, p)) for p in self.trajectory_paths],
                "synthesize": [
                    {"domain": s.domain, "n_turns": s.n_turns, "seed": s.seed} for s in self.synthesize
                ],
            },
            "turns": self.turns if isinstance(self.turns, str) else list(self.turns),
            "position_policy": self.position_policy,
            "probe_policy": self.probe_policy,
            "pivot": self.pivot,
            "logit_change_metric": self.logit_change_metric,
            "tau": self.tau,
            "kl_fraction": self.kl_fraction,
            "overlap_threshold": self.overlap_threshold,
            "overlap_top_k": self.overlap_top_k,
            "kl_direction": self.kl_direction,
            "aggregate": self.aggregate,
            "strong_effect": self.strong_effect,
            "ratio_convention": self.ratio_convention,
            "output_dir": str(self.out_path),
            "workers": self.workers,
            "record_timings": self.record_timings,
        }

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Any, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(data, dict):
            raise SchemaError("$", "run config must be a JSON object")
        known = {
            "models", "trajectories", "turns", "position_policy", "probe_policy", "pivot",
            "logit_change_metric", "tau", "kl_fraction", "overlap_threshold", "overlap_top_k",
            "kl_direction", "aggregate", "strong_effect", "ratio_convention", "output_dir",
            "workers", "record_timings",
        }
        for key in data:
            if key not in known:
                raise SchemaError(key, "unknown run config field")
        defaults = load_probe_defaults()
        merged = {k: v for k, v in defaults.items() if k in known}
        merged.update(data)

        config = cls(
            models=_parse_models(merged.get("models")),
            trajectory_paths=_parse_paths(merged.get("trajectories")),
            synthesize=_parse_synth(merged.get("trajectories")),
            turns=_parse_turns(merged.get("turns", "all")),
            position_policy=_parse_policy(merged.get("position_policy", "boundaries"), "position_policy"),
            probe_policy=_parse_policy(merged.get("probe_policy", "boundaries"), "probe_policy"),
            pivot=_parse_pivot(merged.get("pivot", "previous_turn")),
            logit_change_metric=_choice(merged.get("logit_change_metric", "l2"), LOGIT_METRICS, "logit_change_metric"),
            tau=_positive(merged.get("tau", 0.05), "tau"),
            kl_fraction=_fraction(merged.get("kl_fraction", 0.5), "kl_fraction"),
            overlap_threshold=_fraction(merged.get("overlap_threshold", 0.3), "overlap_threshold"),
            overlap_top_k=_count(merged.get("overlap_top_k", 5), "overlap_top_k"),
            kl_direction=_choice(merged.get("kl_direction", "final_lens"), KL_DIRECTIONS, "kl_direction"),
            aggregate=_choice(merged.get("aggregate", "mean"), AGGREGATES, "aggregate"),
            strong_effect=_positive(merged.get("strong_effect", 0.1), "strong_effect"),
            ratio_convention=_choice(
                merged.get("ratio_convention", "ed"), tuple(CONVENTION_ALIASES), "ratio_convention"
            ),
            output_dir=_string(merged.get("output_dir", "runs/latest"), "output_dir"),
            workers=_count(merged.get("workers", 1), "workers"),
            record_timings=bool(merged.get("record_timings", False)),
            base_dir=Path(base_dir).resolve(),
        )
        return config


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Run config not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as error:
            raise SchemaError("$", f"invalid JSON: {error}") from error
    return RunConfig.from_dict(data, base_dir=path.resolve().parent)


# ---------------------------------------------------------------- field parsers

def _string(value: Any, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaError(where, "must be a non-empty string")
    return value


def _choice(value: Any, allowed: tuple[str, ...], where: str) -> str:
    if value not in allowed:
        raise SchemaError(where, f"must be one of {list(allowed)}, got {value!r}")
    return value


def _positive(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
        raise SchemaError(where, f"must be a positive number, got {value!r}")
    return float(value)


def _fraction(value: Any, where: str) -> float:
    value = _positive(value, where)
    if value >= 1:
        raise SchemaError(where, f"must be below 1, got {value}")
    return value


def _count(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise SchemaError(where, f"must be an integer >= 1, got {value!r}")
    return value


def _parse_models(raw: Any) -> tuple[ModelSpec, ...]:
    if not isinstance(raw, list) or not raw:
        raise SchemaError("models", "must be a non-empty list")
    specs = []
    labels = set()
    for i, entry in enumerate(raw):
        where = f"models[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(where, "must be an object")
        for key in entry:
            if key not in ("label", "weights", "preset", "config", "seed"):
                raise SchemaError(f"{where}.{key}", "unknown model field")
        label = _string(entry.get("label"), f"{where}.label")
        if label in labels:
            raise SchemaError(f"{where}.label", f"duplicate label {label!r}")
        labels.add(label)
        sources = [k for k in ("weights", "preset", "config") if entry.get(k) is not None]
        if len(sources) != 1:
            raise SchemaError(where, "give exactly one of weights, preset or config")
        seed = entry.get("seed")
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
            raise SchemaError(f"{where}.seed", "must be an integer")
        config = entry.get("config")
        if config is not None and not isinstance(config, dict):
            raise SchemaError(f"{where}.config", "must be an object")
        preset = entry.get("preset")
        if preset is not None and preset not in load_model_presets():
            raise SchemaError(f"{where}.preset", f"unknown preset {preset!r}")
        weights = entry.get("weights")
        if weights is not None:
            weights = _string(weights, f"{where}.weights")
        specs.append(ModelSpec(label, weights, preset, config, seed))
    return tuple(specs)


def _trajectory_block(raw: Any) -> Dict[str, Any]:
    if not isinstance(raw, dict):
        raise SchemaError("trajectories", "must be an object with paths and/or synthesize")
    if not raw.get("paths") and not raw.get("synthesize"):
        raise SchemaError("trajectories", "needs at least one path or synthesis entry")
    return raw


def _parse_paths(raw: Any) -> tuple[str, ...]:
    paths = _trajectory_block(raw).get("paths", [])
    if not isinstance(paths, list):
        raise SchemaError("trajectories.paths", "must be a list")
    return tuple(_string(p, f"trajectories.paths[{i}]") for i, p in enumerate(paths))


def _parse_synth(raw: Any) -> tuple[SynthSpec, ...]:
    entries = _trajectory_block(raw).get("synthesize", [])
    if not isinstance(entries, list):
        raise SchemaError("trajectories.synthesize", "must be a list")
    specs = []
    for i, entry in enumerate(entries):
        where = f"trajectories.synthesize[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(where, "must be an object")
        domain = _choice(entry.get("domain"), DOMAINS, f"{where}.domain")
        n_turns = _count(entry.get("n_turns"), f"{where}.n_turns")
        seed = entry.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise SchemaError(f"{where}.seed", "must be an integer")
        specs.append(SynthSpec(domain, n_turns, seed))
    return tuple(specs)


def _parse_turns(raw: Any) -> str | tuple[int, ...]:
    if raw == "all":
        return "all"
    if not isinstance(raw, list) or not raw:
        raise SchemaError("turns", 'must be "all" or a non-empty list of turn indices')
    return tuple(sorted({_count(r, f"turns[{i}]") for i, r in enumerate(raw)}))


def _parse_policy(raw: Any, where: str) -> str:
    try:
        return str(PositionPolicy.parse(_string(raw, where)))
    except InputError as error:
        raise SchemaError(where, str(error)) from error


def _parse_pivot(raw: Any) -> str | int:
    if isinstance(raw, int) and not isinstance(raw, bool):
        if raw < 0:
            raise SchemaError("pivot", "an explicit pivot must be >= 0")
        return raw
    return _choice(raw, PIVOT_NAMES, "pivot")


# ---------------------------------------------------------------- models

def build_model(spec: ModelSpec, base_dir: Path) -> Weights:
    """Weights for one model entry: loaded from a container or initialised from a config."""
    if spec.weights is not None:
        _, weights = load_weights(resolve_path(base_dir, spec.weights))
        return weights
    if spec.preset is not None:
        fields = dict(load_model_presets()[spec.preset])
        where = f"preset {spec.preset}"
    else:
        fields = dict(spec.config or {})
        where = f"models.{spec.label}.config"
    if spec.seed is not None:
        fields["seed"] = spec.seed
    try:
        config = ModelConfig.from_dict(fields, path=where)
    except (TypeError, ValueError) as error:
        if isinstance(error, DepthError):
            raise
        raise SchemaError(where, str(error)) from error
    return init_random(config)
