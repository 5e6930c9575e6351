"""Dense float64 kernels: RMSNorm, softmax with retained statistics, online merge."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_EPS = 1e-6


class NonFiniteError(ArithmeticError):
    """A layer function produced NaN or inf."""


def as_vector(x: Sequence[float] | np.ndarray) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def check_finite(v: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return v


def rmsnorm(x: np.ndarray, gain: np.ndarray | None = None, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + eps)``.

    ``x`` may be a single vector or a stack of row vectors; the statistic is
    taken over the last axis.
    """
    x = np.asarray(x, dtype=np.float64)
    if gain is None:
        gain = np.ones(x.shape[-1])
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"gain has shape {gain.shape}, expected ({x.shape[-1]},)")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * (x / rms)


@dataclass
class SoftmaxStats:
    """Partial softmax result over some set of sources.

    ``out`` is the unnormalized sum ``sum_i exp(s_i - m) v_i``, ``m`` the max
    logit and ``lse`` the denominator ``sum_i exp(s_i - m)`` (not its log).
    An empty partial has ``m = -inf`` and ``lse = 0``.
    """

    out: np.ndarray
    m: float
    lse: float

    @classmethod
    def empty(cls, d: int) -> SoftmaxStats:
        return cls(np.zeros(d), float("-inf"), 0.0)

    @property
    def is_empty(self) -> bool:
        return self.lse == 0.0

    def normalize(self) -> np.ndarray:
        if self.is_empty:
            raise ValueError("cannot normalize an empty softmax partial")
        return self.out / self.lse


def softmax_with_stats(logits: Sequence[float] | np.ndarray) -> tuple[np.ndarray, float, float]:
    """Return ``(probs, m, lse)`` with ``probs = exp(logits - m) / lse``."""
    s = np.asarray(logits, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("softmax needs a non-empty 1-D sequence of logits")
    if not np.all(np.isfinite(s)):
        raise ValueError("logits must be finite")
    m = float(s.max())
    e = np.exp(s - m)
    lse = float(e.sum())
    return e / lse, m, lse


def attn_with_stats(
    query: np.ndarray,
    values: np.ndarray,
    gain: np.ndarray | None = None,
    eps: float = DEFAULT_EPS,
) -> SoftmaxStats:
    """Depth attention of one query over ``values`` (rows), keeping the stats.

    Keys are the values themselves after RMSNorm; there is no temperature.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == 0:
        return SoftmaxStats.empty(len(query))
    if values.shape[1] != len(query):
        raise ValueError(f"query has length {len(query)}, values have width {values.shape[1]}")
    logits = rmsnorm(values, gain, eps) @ query
    probs, m, lse = softmax_with_stats(logits)
    weights = probs * lse  # exp(s - m)
    return SoftmaxStats(weights @ values, m, lse)


def online_merge(a: SoftmaxStats, b: SoftmaxStats) -> SoftmaxStats:
    """Combine two partials into the exact partial over the union of their sources."""
    if a.out.shape != b.out.shape:
        raise ValueError(f"dimension mismatch: {a.out.shape} vs {b.out.shape}")
    if a.is_empty:
        return SoftmaxStats(b.out.copy(), b.m, b.lse)
    if b.is_empty:
        return SoftmaxStats(a.out.copy(), a.m, a.lse)
    m = max(a.m, b.m)
    ca = np.exp(a.m - m)
    cb = np.exp(b.m - m)
    return SoftmaxStats(ca * a.out + cb * b.out, m, float(ca * a.lse + cb * b.lse))
