"""Full attention residuals: each layer input is a softmax over every earlier output."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import DEFAULT_EPS, as_vector, check_finite, rmsnorm, softmax_with_stats

LayerFn = Callable[[np.ndarray], np.ndarray]

# Source tags: ("embedding",), ("layer", i), ("block", n), ("partial", n, i)
Tag = tuple


@dataclass
class PseudoQuery:
    """Learned depth query of one sub-layer, with the RMSNorm applied to its keys."""

    w: np.ndarray
    gain: np.ndarray
    eps: float = DEFAULT_EPS

    @classmethod
    def zeros(cls, d: int, eps: float = DEFAULT_EPS) -> PseudoQuery:
        return cls(np.zeros(d), np.ones(d), eps)

    def copy(self) -> PseudoQuery:
        return PseudoQuery(self.w.copy(), self.gain.copy(), self.eps)


@dataclass
class SourceSet:
    tags: list[Tag]
    values: np.ndarray  # (k, d)

    def __post_init__(self) -> None:
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if len(self.tags) != self.values.shape[0]:
            raise ValueError("one tag per source value is required")

    def __len__(self) -> int:
        return len(self.tags)


@dataclass
class DepthTrace:
    """Per-layer record of a forward pass through the depth stack.

    ``inputs[l-1]`` is h_l, ``outputs[l-1]`` is f_l(h_l). ``alphas`` and
    ``sources`` are empty for the standard residual stream.
    """

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    alphas: list[np.ndarray] = field(default_factory=list)
    sources: list[SourceSet] = field(default_factory=list)
    final: np.ndarray | None = None
    final_alpha: np.ndarray | None = None
    final_sources: SourceSet | None = None


def depth_logits(q: PseudoQuery, values: np.ndarray) -> np.ndarray:
    return rmsnorm(np.atleast_2d(values), q.gain, q.eps) @ q.w


def attn_weights(q: PseudoQuery, sources: SourceSet | np.ndarray) -> np.ndarray:
    values = sources.values if isinstance(sources, SourceSet) else np.atleast_2d(sources)
    if values.shape[0] == 0:
        raise ValueError("depth attention needs at least one source")
    probs, _, _ = softmax_with_stats(depth_logits(q, values))
    return probs


def attend(q: PseudoQuery, sources: SourceSet) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(h, alpha)`` for one query over a source set."""
    alpha = attn_weights(q, sources)
    return alpha @ sources.values, alpha


def full_sources(embedding: np.ndarray, prior_outputs: Sequence[np.ndarray]) -> SourceSet:
    tags: list[Tag] = [("embedding",)] + [("layer", i) for i in range(1, len(prior_outputs) + 1)]
    return SourceSet(tags, np.vstack([embedding, *prior_outputs]))


def full_attnres_input(
    q: PseudoQuery, embedding: np.ndarray, prior_outputs: Sequence[np.ndarray]
) -> np.ndarray:
    h, _ = attend(q, full_sources(as_vector(embedding), prior_outputs))
    return h


def full_forward(
    layers: Sequence[LayerFn], embedding: np.ndarray, queries: Sequence[PseudoQuery]
) -> DepthTrace:
    """Run the stack with full depth attention; ``queries[-1]`` aggregates the output."""
    if len(queries) != len(layers) + 1:
        raise ValueError(f"need {len(layers) + 1} queries (one per layer plus output), got {len(queries)}")
    embedding = as_vector(embedding)
    trace = DepthTrace()
    for l, (f, q) in enumerate(zip(layers, queries), start=1):
        src = full_sources(embedding, trace.outputs)
        h, alpha = attend(q, src)
        y = check_finite(np.asarray(f(h), dtype=np.float64), f"layer {l}")
        trace.inputs.append(h)
        trace.outputs.append(y)
        trace.alphas.append(alpha)
        trace.sources.append(src)
    src = full_sources(embedding, trace.outputs)
    trace.final, trace.final_alpha = attend(queries[-1], src)
    trace.final_sources = src
    return trace
