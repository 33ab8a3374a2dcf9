# utils/numerics.py
"""
Module `numerics` for depth-trace.

Small dense kernels the model and the probes are built on. Tensors are
float32 `numpy.ndarray`s; every reduction (inner products, mean of squares,
KL sums) is accumulated in float64 and cast back to float32. Kernels check
their output and raise `NonFiniteError` instead of passing NaN/Inf along.

Row-wise kernels (softmax, rmsnorm, cosine_similarity, kl_divergence) act on
the last axis, so a matrix is treated as a stack of independent vectors.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from utils.errors import NonFiniteError, ParameterError, ShapeError

DTYPE = np.float32
ACC_DTYPE = np.float64

# Below this norm a vector counts as zero for cosine similarity.
COSINE_EPS = 1e-12
KL_FLOOR = 1e-12
DISTRIBUTION_TOL = 1e-5


class Cosine(NamedTuple):
    value: float | np.ndarray
    degenerate: bool | np.ndarray


class TopK(NamedTuple):
    indices: np.ndarray
    values: np.ndarray


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def as_tensor(values, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Build a float32 tensor, optionally checking `product(shape) == len(data)`."""
    data = np.asarray(values, dtype=DTYPE)
    if shape is not None:
        if any(int(dim) <= 0 for dim in shape):
            raise ShapeError(f"shape dimensions must be positive, got {tuple(shape)}")
        if int(np.prod(shape)) != data.size:
            raise ShapeError(f"shape {tuple(shape)} does not match {data.size} values")
        data = data.reshape(shape)
    return ensure_finite(data)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(m×k) @ (k×n) with float64 accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.astype(ACC_DTYPE), b.astype(ACC_DTYPE)).astype(DTYPE)
    return ensure_finite(out, "matmul output")


def softmax(v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Stable softmax over the last axis.

    `mask` (same shape, True = keep) drops entries from the normalisation;
    dropped entries get probability 0. Every row must keep at least one entry.
    """
    v = np.asarray(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    x = v.astype(ACC_DTYPE)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != input shape {x.shape}")
        if not np.all(mask.any(axis=-1)):
            raise ShapeError("softmax mask removes every entry of a row")
        x = np.where(mask, x, -np.inf)
    ensure_finite(v if mask is None else np.where(mask, v, 0.0), "softmax input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / np.sum(e, axis=-1, keepdims=True)).astype(DTYPE)
    return ensure_finite(out, "softmax output")


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """y = gain * x / sqrt(mean(x^2) + eps) over the last axis."""
    if eps < 0:
        raise ParameterError(f"rmsnorm eps must be >= 0, got {eps}")
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rmsnorm gain {gain.shape} does not match input {x.shape}")
    x64 = x.astype(ACC_DTYPE)
    mean_sq = np.mean(x64 * x64, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = gain.astype(ACC_DTYPE) * x64 / np.sqrt(mean_sq + eps)
    return ensure_finite(y.astype(DTYPE), "rmsnorm output")


def silu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(ACC_DTYPE)
    return ensure_finite((x64 / (1.0 + np.exp(-x64))).astype(DTYPE), "silu output")


def topk(v: np.ndarray, k: int) -> TopK:
    """The k largest entries of a vector; ties go to the lowest index."""
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] == 0:
        raise ShapeError(f"topk expects a non-empty vector, got shape {v.shape}")
    order = topk_rows(v[None, :], k)[0]
    return TopK(order, v[order])


def topk_rows(m: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of every row; ties go to the lowest index."""
    if m.ndim != 2 or m.shape[1] == 0:
        raise ShapeError(f"topk_rows expects a non-empty matrix, got shape {m.shape}")
    if not 1 <= k <= m.shape[1]:
        raise ParameterError(f"topk needs 1 <= k <= {m.shape[1]}, got k={k}")
    ensure_finite(m, "topk input")
    # stable sort keeps index order among equal keys
    return np.argsort(-m.astype(ACC_DTYPE), axis=-1, kind="stable")[:, :k].astype(np.int64)


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> Cosine:
    """x·y / (|x| |y|) over the last axis, clamped to [-1, 1].

    A vector with norm below COSINE_EPS makes the pair degenerate: the value
    is 0 and the flag is set. 1-D inputs give Python scalars.
    """
    if x.shape != y.shape:
        raise ShapeError(f"cosine_similarity shapes differ: {x.shape} vs {y.shape}")
    x64 = x.astype(ACC_DTYPE)
    y64 = y.astype(ACC_DTYPE)
    dot = np.sum(x64 * y64, axis=-1)
    nx = np.sqrt(np.sum(x64 * x64, axis=-1))
    ny = np.sqrt(np.sum(y64 * y64, axis=-1))
    degenerate = (nx < COSINE_EPS) | (ny < COSINE_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.where(degenerate, 0.0, dot / (nx * ny))
    value = np.clip(value, -1.0, 1.0)
    if value.ndim == 0:
        return Cosine(float(value), bool(degenerate))
    return Cosine(value, degenerate)


def _check_distribution(p: np.ndarray, name: str) -> None:
    sums = np.sum(p, axis=-1)
    if np.any(p < 0) or np.any(np.abs(sums - 1.0) > DISTRIBUTION_TOL):
        raise ParameterError(f"{name} is not a probability distribution (sums {sums})")


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float | np.ndarray:
    """KL(p ‖ q) = Σ p log(p / q) over the last axis, q floored at KL_FLOOR."""
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    p64 = p.astype(ACC_DTYPE)
    q64 = np.maximum(q.astype(ACC_DTYPE), KL_FLOOR)
    _check_distribution(p64, "p")
    _check_distribution(q.astype(ACC_DTYPE), "q")
    positive = p64 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(positive, p64 * (np.log(np.where(positive, p64, 1.0)) - np.log(q64)), 0.0)
    kl = np.sum(terms, axis=-1)
    if kl.ndim == 0:
        return float(kl)
    return kl


def l2_norm(x: np.ndarray) -> float:
    """Frobenius norm of any array, in float64."""
    x64 = x.astype(ACC_DTYPE).ravel()
    return float(np.sqrt(np.sum(x64 * x64)))
