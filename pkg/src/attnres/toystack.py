"""A small differentiable depth stack for checking the residual variants end to end.

Every sub-layer is ``tanh(W x + b)``; only the way layer inputs are formed
differs between the ``standard``, ``full`` and ``block`` modes. Gradients are
computed by a hand-written reverse sweep over the forward trace and checked
against central finite differences.
"""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .block import block_forward, block_members, block_sizes
from .full import DepthTrace, PseudoQuery, full_forward
from .numerics import as_vector, check_finite

MODES = ("standard", "full", "block")


@dataclass
class ToyLayer:
    weight: np.ndarray
    bias: np.ndarray
    kind: str = "attn"  # "attn" or "mlp"; naming only

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(self.weight @ x + self.bias)


@dataclass
class ToyStack:
    layers: list[ToyLayer]
    queries: list[PseudoQuery]  # one per layer, then the output aggregator

    @property
    def d(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def L(self) -> int:
        return len(self.layers)


def init_stack(d: int, L: int, seed: int = 0, random_queries: bool = False) -> ToyStack:
    """Weights ~ U(-0.5, 0.5)/sqrt(d), zero biases, zero pseudo-queries, unit gains.

    ``random_queries`` also draws the queries and norm gains, which moves the
    depth softmax away from its uniform starting point.
    """
    rng = np.random.default_rng(seed)
    layers = [
        ToyLayer(rng.uniform(-0.5, 0.5, (d, d)) / np.sqrt(d), np.zeros(d), "attn" if l % 2 == 0 else "mlp")
        for l in range(L)
    ]
    queries = [PseudoQuery.zeros(d) for _ in range(L + 1)]
    if random_queries:
        for q in queries:
            q.w = rng.normal(0.0, 0.5, d)
            q.gain = 1.0 + rng.uniform(-0.2, 0.2, d)
    return ToyStack(layers, queries)


def _sizes(stack: ToyStack, mode: str, block_size: int | None) -> tuple[int, ...]:
    if mode == "block":
        if block_size is None:
            raise ValueError("block mode needs a block_size")
        return block_sizes(stack.L, block_size=block_size)
    return (1,) * stack.L


def forward(stack: ToyStack, embedding: np.ndarray, mode: str = "full", block_size: int | None = None) -> DepthTrace:
    embedding = as_vector(embedding)
    if mode == "standard":
        trace = DepthTrace()
        h = embedding
        for l, f in enumerate(stack.layers, start=1):
            y = check_finite(f(h), f"layer {l}")
            trace.inputs.append(h)
            trace.outputs.append(y)
            h = h + y
        trace.final = h
        return trace
    if mode == "full":
        return full_forward(stack.layers, embedding, stack.queries)
    if mode == "block":
        return block_forward(stack.layers, embedding, stack.queries, _sizes(stack, mode, block_size))
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    queries: list[np.ndarray]
    gains: list[np.ndarray]
    embedding: np.ndarray
    hidden: list[np.ndarray]  # dL/dh_l for every layer input

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        for l, (W, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"W{l}"] = W
            out[f"b{l}"] = b
        for l, (w, g) in enumerate(zip(self.queries, self.gains), start=1):
            out[f"w{l}"] = w
            out[f"g{l}"] = g
        return out


def _attn_backward(q: PseudoQuery, values: np.ndarray, dh: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backprop ``h = softmax(w . RMSNorm(V)) @ V`` to (dV, dw, dgain)."""
    d = values.shape[1]
    rms = np.sqrt(np.mean(values * values, axis=1, keepdims=True) + q.eps)
    unit = values / rms
    keys = q.gain * unit
    s = keys @ q.w
    alpha = np.exp(s - s.max())
    alpha /= alpha.sum()

    dalpha = values @ dh
    ds = alpha * (dalpha - alpha @ dalpha)
    dV = np.outer(alpha, dh)
    dw = ds @ keys
    dkeys = np.outer(ds, q.w)
    dgain = np.sum(dkeys * unit, axis=0)
    dunit = dkeys * q.gain
    dV += dunit / rms - values * (np.sum(dunit * values, axis=1, keepdims=True) / (d * rms**3))
    return dV, dw, dgain


def _columns(tag: tuple, members: list[list[int]]) -> list[int]:
    kind = tag[0]
    if kind == "embedding":
        return [0]
    if kind == "layer":
        return [tag[1]]
    if kind == "block":
        return members[tag[1]]
    if kind == "partial":
        return members[tag[1]][: tag[2]]
    raise ValueError(f"unknown source tag {tag!r}")


def loss_value(
    stack: ToyStack,
    embedding: np.ndarray,
    target: np.ndarray,
    mode: str = "full",
    block_size: int | None = None,
) -> float:
    diff = forward(stack, embedding, mode, block_size).final - as_vector(target)
    return 0.5 * float(diff @ diff)


def loss_and_grad(
    stack: ToyStack,
    embedding: np.ndarray,
    target: np.ndarray,
    mode: str = "full",
    block_size: int | None = None,
) -> tuple[float, Grads]:
    """Loss ``0.5 * ||final - target||^2`` and its exact gradient."""
    trace = forward(stack, embedding, mode, block_size)
    diff = trace.final - as_vector(target)
    loss = 0.5 * float(diff @ diff)
    L, d = stack.L, stack.d
    g = Grads(
        weights=[np.zeros((d, d)) for _ in range(L)],
        biases=[np.zeros(d) for _ in range(L)],
        queries=[np.zeros(d) for _ in range(L + 1)],
        gains=[np.zeros(d) for _ in range(L + 1)],
        embedding=np.zeros(d),
        hidden=[np.zeros(d) for _ in range(L)],
    )

    if mode == "standard":
        dh = diff.copy()  # gradient w.r.t. h_{l+1}
        for l in range(L, 0, -1):
            y, x, layer = trace.outputs[l - 1], trace.inputs[l - 1], stack.layers[l - 1]
            dz = dh * (1.0 - y * y)
            g.weights[l - 1] += np.outer(dz, x)
            g.biases[l - 1] += dz
            dh = dh + layer.weight.T @ dz
            g.hidden[l - 1] = dh.copy()
        g.embedding = dh
        return loss, g

    members = block_members(_sizes(stack, mode, block_size))
    # dv[i]: gradient w.r.t. source v_i (v_0 = embedding, v_l = f_l(h_l))
    dv = np.zeros((L + 1, d))

    def scatter(q_index: int, src, dh: np.ndarray) -> None:
        dV, dw, dgain = _attn_backward(stack.queries[q_index], src.values, dh)
        g.queries[q_index] += dw
        g.gains[q_index] += dgain
        for row, tag in zip(dV, src.tags):
            for col in _columns(tag, members):
                dv[col] += row

    scatter(L, trace.final_sources, diff)
    for l in range(L, 0, -1):
        y, x, layer = trace.outputs[l - 1], trace.inputs[l - 1], stack.layers[l - 1]
        dz = dv[l] * (1.0 - y * y)
        g.weights[l - 1] += np.outer(dz, x)
        g.biases[l - 1] += dz
        dh = layer.weight.T @ dz
        g.hidden[l - 1] = dh
        scatter(l - 1, trace.sources[l - 1], dh)
    g.embedding = dv[0]
    return loss, g


def _parameters(stack: ToyStack, embedding: np.ndarray) -> dict[str, np.ndarray]:
    """Mutable views of every differentiable array, keyed like ``Grads.as_dict``."""
    out = {"embedding": embedding}
    for l, layer in enumerate(stack.layers, start=1):
        out[f"W{l}"] = layer.weight
        out[f"b{l}"] = layer.bias
    for l, q in enumerate(stack.queries, start=1):
        out[f"w{l}"] = q.w
        out[f"g{l}"] = q.gain
    return out


@dataclass
class GradReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float
    worst: str = ""
    rel_errors: dict[str, float] = field(default_factory=dict)


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def gradcheck(
    stack: ToyStack,
    embedding: np.ndarray,
    target: np.ndarray,
    mode: str = "full",
    block_size: int | None = None,
    step: float = 1e-5,
) -> GradReport:
    """Compare ``loss_and_grad`` with central differences on every parameter entry."""
    stack = copy.deepcopy(stack)
    embedding = as_vector(embedding).copy()
    _, grads = loss_and_grad(stack, embedding, target, mode, block_size)
    analytic = grads.as_dict()
    numeric: dict[str, np.ndarray] = {}
    for name, arr in _parameters(stack, embedding).items():
        fd = np.zeros_like(arr)
        flat, out = arr.reshape(-1), fd.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_value(stack, embedding, target, mode, block_size)
            flat[k] = orig - step
            down = loss_value(stack, embedding, target, mode, block_size)
            flat[k] = orig
            out[k] = (up - down) / (2 * step)
        numeric[name] = fd
    errors = {name: float(rel_error(analytic[name], numeric[name]).max()) for name in analytic}
    worst = max(errors, key=errors.__getitem__)
    return GradReport(analytic, numeric, errors[worst], worst, errors)


def norm_profile(trace: DepthTrace) -> list[dict[str, float]]:
    """Per sub-layer input norm, output norm and the largest source norm (if any)."""
    rows = []
    for l, (h, y) in enumerate(zip(trace.inputs, trace.outputs), start=1):
        row = {"layer": l, "input_norm": float(np.linalg.norm(h)), "output_norm": float(np.linalg.norm(y))}
        if trace.sources:
            row["max_source_norm"] = float(np.linalg.norm(trace.sources[l - 1].values, axis=1).max())
        rows.append(row)
    return rows


def weight_heatmap(traces: Sequence[DepthTrace]) -> np.ndarray:
    """Token-averaged depth weights; row l is layer l's input (last row: output), column k the k-th source."""
    if not traces:
        raise ValueError("need at least one trace")
    if not traces[0].alphas:
        raise ValueError("weight heatmaps need an attention-residual trace")
    rows = len(traces[0].alphas) + 1
    cols = max(len(a) for a in [*traces[0].alphas, traces[0].final_alpha])
    acc = np.zeros((rows, cols))
    for t in traces:
        for r, a in enumerate([*t.alphas, t.final_alpha]):
            acc[r, : len(a)] += a
    return acc / len(traces)


def rows_to_csv(header_comment: str, rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# {header_comment}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def heatmap_to_csv(header_comment: str, matrix: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["destination"] + [f"src{k}" for k in range(matrix.shape[1])])
    for r, row in enumerate(matrix, start=1):
        label = str(r) if r < matrix.shape[0] else "output"
        w.writerow([label] + [repr(float(x)) for x in row])
    return buf.getvalue()
