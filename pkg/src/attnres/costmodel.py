"""Memory-access accounting of residual mechanisms, per token per layer.

Costs are affine in the hidden size d and kept exact with ``Fraction``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .block import block_sizes
from .full import PseudoQuery
from .twophase import IOCounter, two_phase_block, two_phase_full_schedule

BF16_BYTES = 2
# Hidden size that reproduces the quoted 15 GB prefill figure (inferred, not stated).
DEFAULT_PREFILL_D = 7168


@dataclass(frozen=True)
class CostExpr:
    """``d_coeff * d + constant``."""

    d_coeff: Fraction = Fraction(0)
    constant: Fraction = Fraction(0)

    def __add__(self, other: CostExpr) -> CostExpr:
        return CostExpr(self.d_coeff + other.d_coeff, self.constant + other.constant)

    def __mul__(self, k: int | Fraction) -> CostExpr:
        return CostExpr(self.d_coeff * k, self.constant * k)

    __rmul__ = __mul__

    def evaluate(self, d: int | Fraction) -> Fraction:
        return self.d_coeff * d + self.constant

    def __str__(self) -> str:
        parts = []
        if self.d_coeff:
            parts.append("d" if self.d_coeff == 1 else f"{_fmt(self.d_coeff)}d")
        if self.constant or not parts:
            parts.append(_fmt(self.constant))
        return "+".join(parts)


def _fmt(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else str(float(x))


def D(coeff: int | Fraction = 1, const: int | Fraction = 0) -> CostExpr:
    return CostExpr(Fraction(coeff), Fraction(const))


@dataclass(frozen=True)
class OpCost:
    operation: str
    read: CostExpr
    write: CostExpr

    @property
    def total(self) -> CostExpr:
        return self.read + self.write


@dataclass(frozen=True)
class IOCost:
    scheme: str
    ops: tuple[OpCost, ...] = field(default_factory=tuple)

    @property
    def read(self) -> CostExpr:
        return sum((o.read for o in self.ops), CostExpr())

    @property
    def write(self) -> CostExpr:
        return sum((o.write for o in self.ops), CostExpr())

    @property
    def total(self) -> CostExpr:
        return self.read + self.write


def _block_count(L: int, N: int) -> Fraction:
    if L < 1 or N < 1 or L % N:
        raise ValueError(f"L={L} is not divisible into N={N} blocks")
    return Fraction(L // N)


def io_standard() -> IOCost:
    return IOCost("standard", (OpCost("Residual Merge", D(2), D(1)),))


def io_mhc(m: int) -> IOCost:
    if m < 1:
        raise ValueError("m must be positive")
    return IOCost(f"mhc(m={m})", (
        OpCost("Compute alpha, beta, A", D(m), D(0, m * m + 2 * m)),
        OpCost("Apply alpha", D(m, m), D(1)),
        OpCost("Apply beta", D(1, m), D(m)),
        OpCost("Apply A", D(m, m * m), D(m)),
        OpCost("Residual Merge", D(2 * m), D(m)),
    ))


def io_attnres_full(L: int, N: int) -> IOCost:
    S = _block_count(L, N)
    return IOCost(f"attnres_full(L={L},N={N})", (
        OpCost("Phase 1 (amortized)", D(N - 1), D(1)),
        OpCost("Phase 2", D(S - 1), D(1)),
    ))


def io_attnres_block(L: int, N: int) -> IOCost:
    S = _block_count(L, N)
    return IOCost(f"attnres_block(L={L},N={N})", (
        OpCost("Phase 1 (amortized)", D(Fraction(N) / S), D(1)),
        OpCost("Phase 2", D(3), D(1)),
    ))


def io_cost(scheme: str, *, L: int = 128, N: int = 8, m: int = 4) -> IOCost:
    builders: dict[str, Callable[[], IOCost]] = {
        "standard": io_standard,
        "mhc": lambda: io_mhc(m),
        "attnres_full": lambda: io_attnres_full(L, N),
        "attnres_block": lambda: io_attnres_block(L, N),
    }
    if scheme not in builders:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {sorted(builders)}")
    return builders[scheme]()


@dataclass(frozen=True)
class TwoPhaseIO:
    """Network-wide read/write totals of the Full AttnRes two-phase schedule, in units of d."""

    L: int
    N: int
    read_inter: int
    write_inter: int
    read_intra_per_block: int
    write_intra_per_block: int

    @property
    def S(self) -> int:
        return self.L // self.N

    @property
    def read_total(self) -> int:
        return self.read_inter + self.N * self.read_intra_per_block

    @property
    def write_total(self) -> int:
        return self.write_inter + self.N * self.write_intra_per_block

    @property
    def read_per_layer(self) -> Fraction:
        return Fraction(self.read_total, self.L)

    @property
    def write_per_layer(self) -> Fraction:
        return Fraction(self.write_total, self.L)

    @property
    def total_per_layer(self) -> Fraction:
        return self.read_per_layer + self.write_per_layer


def full_twophase_io(L: int, N: int) -> TwoPhaseIO:
    """Sum the per-block read/write series of the two-phase schedule term by term."""
    S = int(_block_count(L, N))
    read_inter = sum(2 * (n - 1) * S for n in range(1, N + 1))
    read_intra = sum(2 * (t - 1) for t in range(1, S + 1))
    return TwoPhaseIO(L, N, read_inter, L, read_intra, S)


def prefill_memory(
    N: int,
    T: int,
    d: int = DEFAULT_PREFILL_D,
    bytes_per_element: int = BF16_BYTES,
    shards: int = 1,
    chunk: int | None = None,
) -> float:
    """Bytes per device holding N block representations for a T-token prefill."""
    if min(N, T, d, bytes_per_element, shards) <= 0 or (chunk is not None and chunk <= 0):
        raise ValueError("all sizes must be positive")
    tokens = min(T, chunk) if chunk is not None else T
    return N * (tokens / shards) * d * bytes_per_element


def _random_stack(L: int, d: int, seed: int):
    rng = np.random.default_rng(seed)
    Ws = [rng.uniform(-0.5, 0.5, (d, d)) / np.sqrt(d) for _ in range(L)]
    layers = [lambda x, W=W: np.tanh(W @ x) for W in Ws]
    queries = [PseudoQuery(rng.normal(size=d), np.ones(d)) for _ in range(L + 1)]
    return layers, rng.normal(size=d), queries


def count_twophase_io(scheme: str, L: int, N: int, d: int = 4, seed: int = 0) -> IOCounter:
    """Run the instrumented two-phase schedule and return its d-vector counts."""
    S = int(_block_count(L, N))
    layers, emb, queries = _random_stack(L, d, seed)
    counter = IOCounter()
    if scheme == "attnres_full":
        two_phase_full_schedule(layers, emb, queries, S, counter=counter)
    elif scheme == "attnres_block":
        two_phase_block(layers, emb, queries, block_sizes(L, num_blocks=N), counter=counter)
    else:
        raise ValueError(f"no instrumented schedule for {scheme!r}")
    return counter


SYMBOLIC_TOTAL = {
    "standard": "3d",
    "mhc": "(8m+2)d+2m^2+4m",
    "attnres_full": "(S+N)d",
    "attnres_block": "(N/S+5)d",
}


def cost_table(L: int = 128, N: int = 8, m: int = 4, d: int | None = None) -> list[dict[str, str]]:
    """Rows of the per-layer I/O table; ``Typical`` is in units of d unless ``d`` is given."""
    rows = []
    for name, label in (("standard", "Standard Residuals"), ("mhc", f"mHC (m={m})"),
                        ("attnres_full", "AttnRes Full"), ("attnres_block", "AttnRes Block")):
        cost = io_cost(name, L=L, N=N, m=m)
        total = cost.total
        if d is None:
            typical = f"{_fmt(total.d_coeff)}d"
            if total.constant:
                typical += f"+{_fmt(total.constant)}"
        else:
            typical = _fmt(total.evaluate(d))
        for op in cost.ops:
            rows.append({
                "scheme": label,
                "operation": op.operation,
                "read": str(op.read),
                "write": str(op.write),
                "symbolic": SYMBOLIC_TOTAL[name],
                "typical": typical,
            })
    return rows
