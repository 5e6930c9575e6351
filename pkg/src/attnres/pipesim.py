"""Block-representation traffic under an interleaved pipeline schedule.

One token's forward pass visits the ``C = P * V`` model chunks in order;
chunk ``j`` (1-based) runs on rank ``(j - 1) % P`` in virtual stage
``(j - 1) // P``. Every transition hands the receiving chunk all block
representations completed so far. With caching, a rank keeps every block it
has received (rank 0 also holds the embedding from the start), so later
virtual stages only ship the blocks the receiver has not seen.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from math import floor
from typing import Sequence


@dataclass(frozen=True)
class PipelineConfig:
    P: int
    V: int
    Np: Fraction = Fraction(1)
    d: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "Np", Fraction(self.Np))
        if self.P < 1 or self.V < 1 or self.Np <= 0 or self.d < 1:
            raise ValueError(f"invalid pipeline config {self}")

    @property
    def C(self) -> int:
        return self.P * self.V

    @classmethod
    def from_json(cls, text: str) -> PipelineConfig:
        raw = json.loads(text)
        return cls(int(raw["P"]), int(raw["V"]), Fraction(str(raw.get("Np", 1))), int(raw.get("d", 1)))


@dataclass(frozen=True)
class Transfer:
    src_chunk: int
    dst_chunk: int
    dst_rank: int
    blocks: tuple[str, ...]
    elements: int


@dataclass
class TransferLog:
    config: PipelineConfig
    caching: bool
    transfers: list[Transfer] = field(default_factory=list)
    # rank -> blocks held after each virtual stage, in arrival order
    caches: dict[int, list[list[str]]] = field(default_factory=dict)

    @property
    def total_blocks(self) -> int:
        return sum(len(t.blocks) for t in self.transfers)

    @property
    def total_elements(self) -> int:
        return sum(t.elements for t in self.transfers)

    def total(self, include_backward: bool = False) -> int:
        """Elements moved; the backward pass mirrors the forward traffic."""
        return self.total_elements * (2 if include_backward else 1)

    @property
    def peak_blocks(self) -> int:
        return max((len(t.blocks) for t in self.transfers), default=0)

    def to_json(self) -> str:
        cfg = asdict(self.config)
        cfg["Np"] = str(self.config.Np)
        return json.dumps({
            "config": cfg,
            "caching": self.caching,
            "total_blocks": self.total_blocks,
            "total_elements": self.total_elements,
            "peak_blocks": self.peak_blocks,
            "transfers": [asdict(t) | {"blocks": list(t.blocks)} for t in self.transfers],
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        c = self.config
        buf = io.StringIO()
        buf.write(f"# pipeline-sim P={c.P} V={c.V} Np={c.Np} d={c.d} caching={'on' if self.caching else 'off'}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["src_chunk", "dst_chunk", "dst_rank", "num_blocks", "elements", "blocks"])
        for t in self.transfers:
            w.writerow([t.src_chunk, t.dst_chunk, t.dst_rank, len(t.blocks), t.elements, " ".join(t.blocks)])
        return buf.getvalue()


def uniform_completions(cfg: PipelineConfig) -> list[list[str]]:
    """Blocks completed at the end of each chunk when every chunk yields Np on average.

    Chunk ``j`` completes ``floor(j Np) - floor((j-1) Np)`` blocks, which is
    exactly ``Np`` for integral ``Np``.
    """
    out, made = [], 0
    for j in range(1, cfg.C + 1):
        upto = floor(j * cfg.Np)
        out.append([f"b{k}" for k in range(made + 1, upto + 1)])
        made = upto
    return out


def simulate(
    cfg: PipelineConfig,
    caching: bool,
    completions: Sequence[Sequence[str]] | None = None,
    resident: Sequence[str] = (),
) -> TransferLog:
    """Replay one token's forward pass and log every block transfer.

    ``completions[j-1]`` lists the blocks finished by chunk ``j`` (defaults to
    the uniform Np model); ``resident`` blocks start on rank 0, e.g. the
    embedding ``b0`` when it is one of the attended sources.
    """
    if completions is None:
        completions = uniform_completions(cfg)
    if len(completions) != cfg.C:
        raise ValueError(f"need completions for {cfg.C} chunks, got {len(completions)}")
    log = TransferLog(cfg, caching)
    held: dict[int, list[str]] = {r: [] for r in range(cfg.P)}
    held[0].extend(resident)
    log.caches = {r: [] for r in range(cfg.P)}
    available = list(resident)
    for j in range(1, cfg.C + 1):
        if j > 1:
            rank = (j - 1) % cfg.P
            if caching:
                payload = tuple(b for b in available if b not in held[rank])
            else:
                payload = tuple(available)
            held[rank].extend(b for b in payload if b not in held[rank])
            log.transfers.append(Transfer(j - 1, j, rank, payload, int(len(payload) * cfg.d)))
        available.extend(completions[j - 1])
        if j % cfg.P == 0:
            for r in range(cfg.P):
                log.caches[r].append(list(held[r]))
    return log


def comm_naive(cfg: PipelineConfig) -> Fraction:
    return Fraction(cfg.C * (cfg.C - 1), 2) * cfg.Np * cfg.d


def comm_cached(cfg: PipelineConfig) -> Fraction:
    P = cfg.P
    return (Fraction(P * (P - 1), 2) + (cfg.V - 1) * P * P) * cfg.Np * cfg.d


def figure_example(caching: bool = True) -> TransferLog:
    """4 ranks, 2 virtual stages; each block spans two ranks and ``b0`` starts on rank 0."""
    cfg = PipelineConfig(P=4, V=2, Np=Fraction(1, 2))
    completions = [[] if j % 2 else [f"b{j // 2}"] for j in range(1, 9)]
    return simulate(cfg, caching, completions, resident=["b0"])
