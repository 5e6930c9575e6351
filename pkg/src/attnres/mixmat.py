"""Depth mixing matrices of residual variants.

Row ``l - 1`` of an ``L x L`` matrix holds the weights layer ``l`` puts on
the sources ``v_0 .. v_{l-1}`` (``v_0`` is the embedding), so
``h = M @ V`` with ``V`` stacking ``v_0 .. v_{L-1}`` as rows.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .block import block_members
from .full import DepthTrace, PseudoQuery, attn_weights

RANK_TOL = 1e-9


@dataclass
class DepthMixMatrix:
    variant: str
    entries: np.ndarray

    @property
    def L(self) -> int:
        return self.entries.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.shape[0] != self.L:
            raise ValueError(f"expected {self.L} source rows, got {values.shape[0]}")
        return self.entries @ values

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# variant={self.variant} L={self.L}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer"] + [f"v{i}" for i in range(self.L)])
        for l, row in enumerate(self.entries, start=1):
            w.writerow([l] + [repr(float(x)) for x in row])
        return buf.getvalue()


@dataclass
class MhcParams:
    """Multi-stream (m)HC parameters for ``L`` layers and ``m`` streams.

    ``alphas[l-1]`` is the read-out of layer ``l``; ``betas[i]`` spreads source
    ``v_i`` over the streams; ``transitions[l-2]`` is ``A_l`` for ``l >= 2``.
    """

    alphas: list[np.ndarray]
    betas: list[np.ndarray]
    transitions: list[np.ndarray]
    doubly_stochastic: bool = False

    def __post_init__(self) -> None:
        L = len(self.alphas)
        if L < 1 or len(self.betas) != L or len(self.transitions) != L - 1:
            raise ValueError("need L alphas, L betas and L-1 transitions")
        m = len(self.alphas[0])
        for v in (*self.alphas, *self.betas):
            if np.shape(v) != (m,):
                raise ValueError(f"stream vectors must have length {m}")
        for A in self.transitions:
            if np.shape(A) != (m, m):
                raise ValueError(f"transitions must be {m}x{m}")
        if self.doubly_stochastic:
            for A in self.transitions:
                A = np.asarray(A)
                if np.any(A < 0) or not (np.allclose(A.sum(0), 1) and np.allclose(A.sum(1), 1)):
                    raise ValueError("transition is not doubly stochastic")

    @property
    def m(self) -> int:
        return len(self.alphas[0])

    @property
    def L(self) -> int:
        return len(self.alphas)

    @classmethod
    def random(cls, L: int, m: int, rng: np.random.Generator) -> MhcParams:
        return cls(
            [rng.normal(size=m) for _ in range(L)],
            [rng.normal(size=m) for _ in range(L)],
            [rng.normal(size=(m, m)) / np.sqrt(m) for _ in range(L - 1)],
        )


def mix_standard(L: int) -> DepthMixMatrix:
    if L < 1:
        raise ValueError("L must be positive")
    return DepthMixMatrix("standard", np.tril(np.ones((L, L))))


def mix_highway(gates: Sequence[float]) -> DepthMixMatrix:
    """Scalar-gate Highway; ``gates`` are ``g_2 .. g_L``."""
    g = np.asarray(gates, dtype=np.float64)
    if np.any((g < 0) | (g > 1)):
        raise ValueError("gates must lie in [0, 1]")
    L = len(g) + 1
    gate = np.concatenate([[np.nan, np.nan], g])  # gate[j] = g_j
    M = np.zeros((L, L))
    for l in range(1, L + 1):
        # carry[i] = prod_{j=i+1}^{l} (1 - g_j)
        carry = np.ones(l + 1)
        for i in range(l - 1, 0, -1):
            carry[i] = carry[i + 1] * (1.0 - gate[i + 1])
        M[l - 1, 0] = carry[1]
        for i in range(1, l):
            M[l - 1, i] = gate[i + 1] * carry[i + 1]
    return DepthMixMatrix("highway", M)


def mix_mhc(p: MhcParams) -> DepthMixMatrix:
    """``M[i -> l] = beta_i^T A_{i+2} ... A_l alpha_l``."""
    L, m = p.L, p.m
    M = np.zeros((L, L))
    for l in range(1, L + 1):
        # walk i downward, growing the transition product on the left
        prod = np.eye(m)
        for i in range(l - 1, -1, -1):
            M[l - 1, i] = p.betas[i] @ prod @ p.alphas[l - 1]
            if i >= 1:
                prod = p.transitions[i - 1] @ prod  # A_{i+1}
    return DepthMixMatrix("mhc", M)


def mix_attnres_full(queries: Sequence[PseudoQuery], keys: np.ndarray) -> DepthMixMatrix:
    """Row ``l`` is the softmax of query ``l`` over keys ``v_0 .. v_{l-1}``."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    L = len(queries)
    if keys.shape[0] < L:
        raise ValueError(f"need at least {L} key rows")
    M = np.zeros((L, L))
    for l, q in enumerate(queries, start=1):
        M[l - 1, :l] = attn_weights(q, keys[:l])
    return DepthMixMatrix("attnres_full", M)


def mix_attnres_block(trace: DepthTrace, sizes: Sequence[int]) -> DepthMixMatrix:
    """Expand a Block AttnRes trace's weights over the layers each source sums."""
    members = block_members(sizes)
    L = len(trace.alphas)
    M = np.zeros((L, L))
    for l, (alpha, src) in enumerate(zip(trace.alphas, trace.sources), start=1):
        for a, tag in zip(alpha, src.tags):
            if tag[0] == "embedding":
                cols = [0]
            elif tag[0] == "block":
                cols = members[tag[1]]
            elif tag[0] == "partial":
                cols = members[tag[1]][: tag[2]]
            else:  # ("layer", i), from a full trace
                cols = [tag[1]]
            M[l - 1, cols] += a
    return DepthMixMatrix("attnres_block", M)


def numerical_rank(A: np.ndarray, tol: float = RANK_TOL) -> int:
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def semiseparable_rank(M: DepthMixMatrix | np.ndarray, tol: float = RANK_TOL) -> int:
    """Largest numerical rank of a lower-left block ``M[t:, :t+1]`` (diagonal included)."""
    A = M.entries if isinstance(M, DepthMixMatrix) else np.asarray(M, dtype=np.float64)
    return max(numerical_rank(A[t:, : t + 1], tol) for t in range(A.shape[0]))


def highway_recurrence(gates: Sequence[float], values: np.ndarray) -> np.ndarray:
    """Layer inputs of ``h_l = (1 - g_l) h_{l-1} + g_l v_{l-1}``, ``h_1 = v_0``."""
    h = [values[0]]
    for l, g in enumerate(gates, start=2):
        h.append((1 - g) * h[-1] + g * values[l - 1])
    return np.vstack(h)


def mhc_recurrence(p: MhcParams, values: np.ndarray) -> np.ndarray:
    """Layer inputs ``H_l alpha_l`` of the multi-stream recurrence with outputs fixed to ``values``."""
    H = np.outer(values[0], p.betas[0])
    out = [H @ p.alphas[0]]
    for l in range(2, p.L + 1):
        H = H @ p.transitions[l - 2] + np.outer(values[l - 1], p.betas[l - 1])
        out.append(H @ p.alphas[l - 1])
    return np.vstack(out)
