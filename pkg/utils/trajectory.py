# utils/trajectory.py
"""
Module `trajectory` for depth-trace.

Multi-turn agent transcripts (user / thought / action / observation /
assistant segments), the byte-level tokenizer that keeps track of where
each turn ends, and a template-driven generator for the three study domains.

Token ids 0-255 are raw UTF-8 bytes; ids 256-260 are role markers, one
opening every segment. The input at turn r is the first n_r tokens, where
n_r is the cumulative length after turn r.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from utils.errors import InputError, ParameterError, SchemaError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"
TEMPLATES_PATH = CONFIG_DIR / "trajectory_templates.json"

SEGMENT_KINDS = ("user", "thought", "action", "observation", "assistant")
DOMAINS = ("deep_research", "code_generation", "tabular_processing")
BYTE_VOCAB = 256
ROLE_MARKERS = {kind: BYTE_VOCAB + i for i, kind in enumerate(SEGMENT_KINDS)}
MARKER_KINDS = {token: kind for kind, token in ROLE_MARKERS.items()}
MIN_VOCAB = BYTE_VOCAB + len(SEGMENT_KINDS)

# the cycle every turn runs through after its user message
AGENT_CYCLE = ("thought", "action", "observation", "assistant")


@dataclass(frozen=True)
class Segment:
    kind: str
    text: str


@dataclass(frozen=True)
class Turn:
    index: int
    segments: tuple[Segment, ...]


@dataclass(frozen=True)
class Trajectory:
    domain: str
    turns: tuple[Turn, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise SchemaError("domain", f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if not self.turns:
            raise SchemaError("turns", "a trajectory needs at least one turn")
        for position, turn in enumerate(self.turns):
            if turn.index != position + 1:
                raise SchemaError(f"turns[{position}].index", f"expected {position + 1}, got {turn.index}")
            if not turn.segments:
                raise SchemaError(f"turns[{position}].segments", "a turn needs at least one segment")
            for j, segment in enumerate(turn.segments):
                if segment.kind not in SEGMENT_KINDS:
                    raise SchemaError(
                        f"turns[{position}].segments[{j}].kind", f"unknown segment kind {segment.kind!r}"
                    )

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "metadata": dict(self.metadata),
            "turns": [
                {"index": t.index, "segments": [{"kind": s.kind, "text": s.text} for s in t.segments]}
                for t in self.turns
            ],
        }

    @classmethod
    def from_dict(cls, data) -> "Trajectory":
        if not isinstance(data, dict):
            raise SchemaError("$", "trajectory must be a JSON object")
        for key in ("domain", "turns"):
            if key not in data:
                raise SchemaError(key, "missing required key")
        if not isinstance(data["domain"], str):
            raise SchemaError("domain", "must be a string")
        metadata = data.get("metadata", {})
        if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
            raise SchemaError("metadata", "must be an object of strings")
        if not isinstance(data["turns"], list):
            raise SchemaError("turns", "must be a list")
        turns = []
        for i, raw_turn in enumerate(data["turns"]):
            where = f"turns[{i}]"
            if not isinstance(raw_turn, dict):
                raise SchemaError(where, "must be an object")
            if not isinstance(raw_turn.get("index"), int):
                raise SchemaError(f"{where}.index", "missing or not an integer")
            if not isinstance(raw_turn.get("segments"), list):
                raise SchemaError(f"{where}.segments", "missing or not a list")
            segments = []
            for j, raw in enumerate(raw_turn["segments"]):
                seg_where = f"{where}.segments[{j}]"
                if not isinstance(raw, dict):
                    raise SchemaError(seg_where, "must be an object")
                if raw.get("kind") not in SEGMENT_KINDS:
                    raise SchemaError(f"{seg_where}.kind", f"unknown segment kind {raw.get('kind')!r}")
                if not isinstance(raw.get("text"), str):
                    raise SchemaError(f"{seg_where}.text", "missing or not a string")
                segments.append(Segment(raw["kind"], raw["text"]))
            turns.append(Turn(raw_turn["index"], tuple(segments)))
        return cls(data["domain"], tuple(turns), dict(metadata))


@dataclass(frozen=True)
class TokenizedTrajectory:
    tokens: tuple[int, ...]
    turn_offsets: tuple[int, ...]                 # n_1 < n_2 < ... < n_R
    segment_spans: tuple[tuple[str, int, int], ...]
    domain: str = ""

    @property
    def n_turns(self) -> int:
        return len(self.turn_offsets)

    def boundary(self, r: int) -> int:
        """Position of the final token of turn r."""
        _check_turn(self, r)
        return self.turn_offsets[r - 1] - 1

    def boundaries(self, up_to: int | None = None) -> tuple[int, ...]:
        last = self.n_turns if up_to is None else up_to
        return tuple(self.boundary(r) for r in range(1, last + 1))


def _check_turn(tok: TokenizedTrajectory, r: int) -> None:
    if not 1 <= r <= tok.n_turns:
        raise ParameterError(f"turn {r} out of range [1, {tok.n_turns}]")


def tokenize(trajectory: Trajectory, vocab_size: int) -> TokenizedTrajectory:
    if vocab_size < MIN_VOCAB:
        raise ParameterError(f"vocab_size {vocab_size} too small for the {MIN_VOCAB} reserved ids")
    tokens: list[int] = []
    offsets: list[int] = []
    spans: list[tuple[str, int, int]] = []
    for turn in trajectory.turns:
        for segment in turn.segments:
            start = len(tokens)
            tokens.append(ROLE_MARKERS[segment.kind])
            tokens.extend(segment.text.encode("utf-8"))
            spans.append((segment.kind, start, len(tokens)))
        offsets.append(len(tokens))
    return TokenizedTrajectory(tuple(tokens), tuple(offsets), tuple(spans), trajectory.domain)


def detokenize(tok: TokenizedTrajectory) -> Trajectory:
    """Rebuild the transcript (metadata is not carried by tokens)."""
    turns = []
    start = 0
    for r, end in enumerate(tok.turn_offsets, start=1):
        segments = []
        kind, payload = None, bytearray()
        for token in tok.tokens[start:end]:
            if token in MARKER_KINDS:
                if kind is not None:
                    segments.append(Segment(kind, payload.decode("utf-8")))
                kind, payload = MARKER_KINDS[token], bytearray()
            elif 0 <= token < BYTE_VOCAB and kind is not None:
                payload.append(token)
            else:
                raise InputError(f"token {token} at turn {r} is not a byte after a role marker")
        if kind is not None:
            segments.append(Segment(kind, payload.decode("utf-8")))
        turns.append(Turn(r, tuple(segments)))
        start = end
    return Trajectory(tok.domain, tuple(turns))


def prefix_for_turn(tok: TokenizedTrajectory, r: int) -> tuple[int, ...]:
    """x^(r): the cumulative input the model sees at turn r."""
    _check_turn(tok, r)
    return tok.tokens[: tok.turn_offsets[r - 1]]


# ---------------------------------------------------------------- synthesis

def load_templates() -> dict:
    """Load per-domain text templates from config/trajectory_templates.json."""
    if not TEMPLATES_PATH.is_file():
        raise FileNotFoundError(f"Template file not found: {TEMPLATES_PATH}")
    with TEMPLATES_PATH.open("r", encoding="utf-8") as handle:
        templates = json.load(handle)
    for domain, spec in templates.items():
        for j, text in enumerate(spec.get("user_followup", [])):
            if "{first}" not in text:
                raise SchemaError(f"{domain}.user_followup[{j}]", "follow-ups must reference {first}")
    return templates


def synthesize(domain: str, n_turns: int, seed: int) -> Trajectory:
    """Deterministic trajectory whose later turns reuse the artifact minted in turn 1."""
    if n_turns < 1:
        raise ParameterError(f"n_turns must be >= 1, got {n_turns}")
    templates = load_templates()
    if domain not in templates:
        raise ParameterError(f"unknown domain {domain!r}; expected one of {sorted(templates)}")
    spec = templates[domain]
    rng = random.Random(f"{domain}:{n_turns}:{seed}")
    topic = rng.choice(spec["topics"])

    artifacts: list[str] = []
    turns = []
    for r in range(1, n_turns + 1):
        artifact = f"{spec['artifact_prefix']}_{rng.getrandbits(16):04x}_{r}"
        artifacts.append(artifact)
        slots = {
            "topic": topic,
            "aspect": rng.choice(spec["aspects"]),
            "artifact": artifact,
            "first": artifacts[0],
            "previous": artifacts[-2] if r > 1 else artifact,
            "turn": r,
        }
        opener = spec["user_first"] if r == 1 else spec["user_followup"]
        segments = [Segment("user", rng.choice(opener).format(**slots))]
        for kind in AGENT_CYCLE:
            segments.append(Segment(kind, rng.choice(spec[kind]).format(**slots)))
        turns.append(Turn(r, tuple(segments)))

    metadata = {"generator": "templates", "seed": str(seed), "first_artifact": artifacts[0]}
    return Trajectory(domain, tuple(turns), metadata)


def save_trajectory(trajectory: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(trajectory.to_dict(), handle, ensure_ascii=False, indent=2)
        handle.write("\n")
    return path


def load_trajectory(path: str | Path) -> Trajectory:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Trajectory file not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as error:
            raise SchemaError("$", f"invalid JSON: {error}") from error
    return Trajectory.from_dict(data)
