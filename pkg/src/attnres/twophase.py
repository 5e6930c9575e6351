"""Two-phase evaluation of depth attention.

Phase 1 answers every query of a block against the completed sources in one
batched pass and keeps the softmax statistics. Phase 2 walks the block in
order, folding in the intra-block sources with an online-softmax merge. The
result equals the naive per-layer evaluation up to rounding.

Each schedule optionally takes an :class:`IOCounter` that tallies the d-vector
reads and writes made by the residual mechanism (layer internals excluded).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .block import block_sizes, final_aggregate, BlockState
from .full import DepthTrace, LayerFn, PseudoQuery, attend, full_sources
from .numerics import SoftmaxStats, as_vector, attn_with_stats, check_finite, online_merge

Merge = Callable[[SoftmaxStats, SoftmaxStats], SoftmaxStats]


@dataclass
class IOCounter:
    """Reads and writes in units of one d-dimensional vector."""

    reads: int = 0
    writes: int = 0

    def read(self, n: int = 1) -> None:
        self.reads += n

    def write(self, n: int = 1) -> None:
        self.writes += n

    @property
    def total(self) -> int:
        return self.reads + self.writes


@dataclass
class Phase1Result:
    stats: list[SoftmaxStats]

    def __len__(self) -> int:
        return len(self.stats)


def phase1_batch(queries: Sequence[PseudoQuery], sources: np.ndarray) -> Phase1Result:
    """Attention of every query over the same completed sources, with statistics."""
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    if sources.shape[0] == 0:
        raise ValueError("phase 1 needs at least one source (the embedding)")
    return Phase1Result([attn_with_stats(q.w, sources, q.gain, q.eps) for q in queries])


def phase2_sequential(
    phase1: Phase1Result,
    layers: Sequence[LayerFn],
    queries: Sequence[PseudoQuery],
    *,
    first_layer: int = 1,
    counter: IOCounter | None = None,
    merge: Merge = online_merge,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Sequential intra-block pass of Block AttnRes.

    Returns ``(inputs, outputs, partial_sums)`` where ``partial_sums[i]`` is
    the running sum after ``i + 1`` layers of the block.
    """
    if not len(phase1) == len(layers) == len(queries):
        raise ValueError("phase 1 results, layers and queries must align")
    inputs, outputs, partials = [], [], []
    partial: np.ndarray | None = None
    for i, (p1, f, q) in enumerate(zip(phase1.stats, layers, queries)):
        if i == 0:
            h = p1.normalize()
        else:
            assert partial is not None
            intra = attn_with_stats(q.w, partial, q.gain, q.eps)
            h = merge(p1, intra).normalize()
        y = check_finite(np.asarray(f(h), dtype=np.float64), f"layer {first_layer + i}")
        partial = y.copy() if partial is None else partial + y
        if counter is not None:
            # phase-1 output, previous partial sum, layer output; write new partial sum
            counter.read(3)
            counter.write(1)
        inputs.append(h)
        outputs.append(y)
        partials.append(partial)
    return inputs, outputs, partials


def _check_queries(layers: Sequence[LayerFn], queries: Sequence[PseudoQuery]) -> None:
    if len(queries) != len(layers) + 1:
        raise ValueError(f"need {len(layers) + 1} queries (one per layer plus output), got {len(queries)}")


def two_phase_block(
    layers: Sequence[LayerFn],
    embedding: np.ndarray,
    queries: Sequence[PseudoQuery],
    sizes: Sequence[int],
    *,
    counter: IOCounter | None = None,
    merge: Merge = online_merge,
) -> DepthTrace:
    """Block AttnRes evaluated block by block with the two-phase schedule.

    Phase 1 is counted as one pass over the fixed ``len(sizes)``-slot block
    cache, whatever its current fill.
    """
    _check_queries(layers, queries)
    if sum(sizes) != len(layers):
        raise ValueError(f"block sizes {tuple(sizes)} do not cover {len(layers)} layers")
    blocks = [as_vector(embedding)]
    trace = DepthTrace()
    start = 0
    for s in sizes:
        qs = queries[start:start + s]
        p1 = phase1_batch(qs, np.vstack(blocks))
        if counter is not None:
            counter.read(len(sizes))
            counter.write(s)
        hs, ys, partials = phase2_sequential(
            p1, layers[start:start + s], qs, first_layer=start + 1, counter=counter, merge=merge
        )
        trace.inputs.extend(hs)
        trace.outputs.extend(ys)
        blocks.append(partials[-1])
        start += s
    state = BlockState(blocks, tuple(sizes), None, len(layers))
    trace.final, trace.final_alpha, trace.final_sources = final_aggregate(queries[-1], state)
    return trace


def two_phase_full_schedule(
    layers: Sequence[LayerFn],
    embedding: np.ndarray,
    queries: Sequence[PseudoQuery],
    group_size: int,
    *,
    counter: IOCounter | None = None,
    merge: Merge = online_merge,
) -> DepthTrace:
    """Full AttnRes with layers grouped into scheduling blocks of ``group_size``.

    The grouping changes only the evaluation order. Phase 1 attends over the
    embedding and every output of earlier groups; phase 2 merges the outputs
    produced so far inside the group. Counted reads follow the per-pair key
    plus value convention and leave out the embedding.
    """
    _check_queries(layers, queries)
    embedding = as_vector(embedding)
    trace = DepthTrace()
    start = 0
    for s in block_sizes(len(layers), block_size=group_size):
        qs = queries[start:start + s]
        p1 = phase1_batch(qs, np.vstack([embedding, *trace.outputs]))
        if counter is not None:
            counter.read(2 * start)
            counter.write(s)
        group_outputs: list[np.ndarray] = []
        for t, (p, q) in enumerate(zip(p1.stats, qs)):
            if t == 0:
                h = p.normalize()
            else:
                intra = attn_with_stats(q.w, np.vstack(group_outputs), q.gain, q.eps)
                h = merge(p, intra).normalize()
            if counter is not None:
                counter.read(2 * t)
                counter.write(1)
            l = start + t + 1
            y = check_finite(np.asarray(layers[l - 1](h), dtype=np.float64), f"layer {l}")
            group_outputs.append(y)
            trace.inputs.append(h)
            trace.outputs.append(y)
        start += s
    src = full_sources(embedding, trace.outputs)
    trace.final, trace.final_alpha = attend(queries[-1], src)
    trace.final_sources = src
    return trace
