"""Block attention residuals.

Layer outputs inside a block are summed; layers attend over the completed
block representations ``b_0 .. b_{n-1}`` (``b_0`` is the embedding) plus the
running partial sum of the current block.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .full import DepthTrace, LayerFn, PseudoQuery, SourceSet, Tag, attend
from .numerics import as_vector, check_finite


def block_sizes(
    num_layers: int, block_size: int | None = None, num_blocks: int | None = None
) -> tuple[int, ...]:
    """Partition ``num_layers`` sub-layers into consecutive blocks.

    With ``block_size`` S the blocks have S layers and a final short block
    takes the remaining ``L mod S``. With ``num_blocks`` N the blocks have
    ``L // N`` layers and, when N does not divide L, an extra last block takes
    the remaining ``L mod N``.
    """
    if num_layers < 1:
        raise ValueError("need at least one layer")
    if (block_size is None) == (num_blocks is None):
        raise ValueError("give exactly one of block_size or num_blocks")
    if num_blocks is not None:
        if not 1 <= num_blocks <= num_layers:
            raise ValueError(f"num_blocks must be in [1, {num_layers}]")
        block_size = num_layers // num_blocks
        tail = num_layers % num_blocks
        return (block_size,) * num_blocks + ((tail,) if tail else ())
    assert block_size is not None
    if block_size < 1:
        raise ValueError("block_size must be positive")
    full, tail = divmod(num_layers, block_size)
    return (block_size,) * full + ((tail,) if tail else ())


def block_members(sizes: Sequence[int]) -> list[list[int]]:
    """1-based layer indices of each block; entry 0 is the embedding pseudo-block."""
    members: list[list[int]] = [[0]]
    start = 1
    for s in sizes:
        members.append(list(range(start, start + s)))
        start += s
    return members


def locate(layer: int, sizes: Sequence[int]) -> tuple[int, int]:
    """(block n, position i) of 1-based ``layer``; both 1-based."""
    start = 1
    for n, s in enumerate(sizes, start=1):
        if layer < start + s:
            return n, layer - start + 1
        start += s
    raise IndexError(f"layer {layer} is beyond the {sum(sizes)} partitioned layers")


@dataclass
class BlockState:
    blocks: list[np.ndarray]
    sizes: tuple[int, ...]
    partial: np.ndarray | None = None
    layer_index: int = 0  # sub-layers already applied

    @classmethod
    def initial(cls, embedding: np.ndarray, sizes: Sequence[int]) -> BlockState:
        return cls([as_vector(embedding)], tuple(sizes))

    @property
    def current_block(self) -> int:
        """Index n of the block the partial sum belongs to."""
        return len(self.blocks)

    def next_position(self) -> int:
        return locate(self.layer_index + 1, self.sizes)[1]

    def fold(self) -> BlockState:
        """Close the current block: its partial sum becomes ``b_n``."""
        if self.partial is None:
            return self
        return dataclasses.replace(self, blocks=[*self.blocks, self.partial], partial=None)


def intra_accumulate(state: BlockState, layer_output: np.ndarray) -> BlockState:
    y = as_vector(layer_output)
    partial = y.copy() if state.partial is None else state.partial + y
    return dataclasses.replace(state, partial=partial)


def value_matrix(state: BlockState, i: int) -> SourceSet:
    if i < 1:
        raise ValueError("intra-block position is 1-based")
    n = state.current_block
    tags: list[Tag] = [("embedding",)] + [("block", k) for k in range(1, n)]
    values = list(state.blocks)
    if i >= 2:
        if state.partial is None:
            raise ValueError(f"position {i} of block {n} requires a partial sum")
        tags.append(("partial", n, i - 1))
        values.append(state.partial)
    return SourceSet(tags, np.vstack(values))


def block_attnres_input(q: PseudoQuery, state: BlockState, i: int) -> np.ndarray:
    h, _ = attend(q, value_matrix(state, i))
    return h


def block_forward_layer(
    state: BlockState, f: LayerFn, q: PseudoQuery
) -> tuple[BlockState, np.ndarray, np.ndarray, SourceSet, np.ndarray]:
    """Apply one sub-layer. Returns ``(state, h, alpha, sources, f(h))``."""
    i = state.next_position()
    if i == 1:
        state = state.fold()
    src = value_matrix(state, i)
    h, alpha = attend(q, src)
    y = check_finite(np.asarray(f(h), dtype=np.float64), f"layer {state.layer_index + 1}")
    state = intra_accumulate(state, y)
    state = dataclasses.replace(state, layer_index=state.layer_index + 1)
    return state, h, alpha, src, y


def final_aggregate(q: PseudoQuery, state: BlockState) -> tuple[np.ndarray, np.ndarray, SourceSet]:
    state = state.fold()
    tags: list[Tag] = [("embedding",)] + [("block", k) for k in range(1, len(state.blocks))]
    src = SourceSet(tags, np.vstack(state.blocks))
    h, alpha = attend(q, src)
    return h, alpha, src


def block_forward(
    layers: Sequence[LayerFn],
    embedding: np.ndarray,
    queries: Sequence[PseudoQuery],
    sizes: Sequence[int],
) -> DepthTrace:
    if len(queries) != len(layers) + 1:
        raise ValueError(f"need {len(layers) + 1} queries (one per layer plus output), got {len(queries)}")
    if sum(sizes) != len(layers):
        raise ValueError(f"block sizes {tuple(sizes)} do not cover {len(layers)} layers")
    state = BlockState.initial(embedding, sizes)
    trace = DepthTrace()
    for f, q in zip(layers, queries):
        state, h, alpha, src, y = block_forward_layer(state, f, q)
        trace.inputs.append(h)
        trace.outputs.append(y)
        trace.alphas.append(alpha)
        trace.sources.append(src)
    trace.final, trace.final_alpha, trace.final_sources = final_aggregate(queries[-1], state)
    return trace
