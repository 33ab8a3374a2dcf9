# utils/weights_io.py
"""
Module `weights_io` for depth-trace.

Single-file weight container:

    8 bytes   little-endian header length N
    N bytes   JSON object: tensor name -> {"dtype": "f32", "shape": [...],
              "offset": int, "length": int}; the model config sits under
              the reserved key "__config__"
    rest      concatenated little-endian float32 blobs (offsets are relative
              to the start of this region)

Tensors are written in the config's canonical order, so saving the same
weights twice produces identical bytes.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from utils.errors import ParameterError, SchemaError, WeightsFormatError
from utils.model import ModelConfig, Weights

logger = logging.getLogger(__name__)

CONFIG_KEY = "__config__"
HEADER_LEN = struct.Struct("<Q")
FLOAT_BYTES = 4


def save_weights(config: ModelConfig, weights: Weights, path: str | Path) -> Path:
    path = Path(path)
    if weights.config != config:
        raise WeightsFormatError("weights were built for a different model config")
    header: dict[str, object] = {CONFIG_KEY: config.to_dict()}
    blobs = []
    offset = 0
    for name, shape in config.tensor_shapes().items():
        blob = np.ascontiguousarray(weights[name], dtype="<f4").tobytes()
        header[name] = {"dtype": "f32", "shape": list(shape), "offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(HEADER_LEN.pack(len(header_bytes)))
        handle.write(header_bytes)
        for blob in blobs:
            handle.write(blob)
    logger.info("saved %d tensors to %s", len(blobs), path)
    return path


def _read_header(raw: bytes) -> tuple[dict, int]:
    if len(raw) < HEADER_LEN.size:
        raise WeightsFormatError("file too short for the header length field")
    (n,) = HEADER_LEN.unpack_from(raw)
    start = HEADER_LEN.size
    if len(raw) < start + n:
        raise WeightsFormatError(f"header declares {n} bytes but the file is truncated")
    try:
        header = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise WeightsFormatError(f"malformed header: {error}") from error
    if not isinstance(header, dict):
        raise WeightsFormatError("malformed header: expected a JSON object")
    return header, start + n


def load_weights(path: str | Path) -> tuple[ModelConfig, Weights]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Weight file not found: {path}")
    raw = path.read_bytes()
    header, blob_start = _read_header(raw)
    if CONFIG_KEY not in header:
        raise WeightsFormatError(f"malformed header: missing {CONFIG_KEY!r}")
    try:
        config = ModelConfig.from_dict(header.pop(CONFIG_KEY), path=CONFIG_KEY)
    except (SchemaError, ParameterError, TypeError) as error:
        raise WeightsFormatError(f"malformed header: {error}") from error

    expected = config.tensor_shapes()
    blob = memoryview(raw)[blob_start:]
    tensors = {}
    for name, entry in header.items():
        if name not in expected:
            raise WeightsFormatError(f"unknown tensor entry {name!r}")
        try:
            dtype, shape = entry["dtype"], tuple(int(d) for d in entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as error:
            raise WeightsFormatError(f"malformed header entry {name!r}: {error}") from error
        if dtype != "f32":
            raise WeightsFormatError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        if int(np.prod(shape)) * FLOAT_BYTES != length:
            raise WeightsFormatError(
                f"tensor {name!r} declares shape {shape} but a blob of {length} bytes: truncated"
            )
        if shape != expected[name]:
            raise WeightsFormatError(f"tensor {name!r} has shape {shape}, config expects {expected[name]}")
        if offset < 0 or offset + length > len(blob):
            raise WeightsFormatError(f"tensor {name!r} blob is truncated")
        tensors[name] = np.frombuffer(blob[offset:offset + length], dtype="<f4").reshape(shape)
    for name in expected:
        if name not in tensors:
            raise WeightsFormatError(f"missing tensor entry {name!r}")
    weights = Weights(config, tensors)
    logger.info("loaded %d tensors from %s", len(tensors), path)
    return config, weights
