"""Functional MoE reference model and routing traces.

The dense math here only ever runs at desk scale (see ``TOY``); the Mixtral
geometry is kept as a preset for capacity and latency arithmetic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ShapeError, TraceInvalidError

PREFILL = "prefill"
DECODE = "decode"


@dataclass(frozen=True)
class ModelShape:
    num_layers: int
    experts_per_layer: int
    top_k: int
    hidden_dim: int
    ffn_dim: int
    bytes_per_param: int = 2

    def __post_init__(self):
        # num_layers=0 is allowed so the forward pass degenerates to identity
        if self.num_layers < 0:
            raise ShapeError("num_layers must be non-negative")
        for name in ("experts_per_layer", "top_k", "hidden_dim", "ffn_dim", "bytes_per_param"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive")
        if self.top_k > self.experts_per_layer:
            raise ShapeError("top_k cannot exceed experts_per_layer")

    @property
    def total_experts(self) -> int:
        return self.num_layers * self.experts_per_layer

    def expert_param_count(self) -> int:
        return 3 * self.hidden_dim * self.ffn_dim

    def expert_bytes(self) -> int:
        return self.expert_param_count() * self.bytes_per_param


MIXTRAL = ModelShape(num_layers=32, experts_per_layer=8, top_k=2, hidden_dim=4096, ffn_dim=14336)
TOY = ModelShape(num_layers=4, experts_per_layer=8, top_k=2, hidden_dim=32, ffn_dim=64)
PRESETS = {"mixtral": MIXTRAL, "toy": TOY}


@dataclass(frozen=True, eq=False)
class ExpertWeights:
    w_in: np.ndarray  # [ffn, hidden]
    w_gate: np.ndarray  # [ffn, hidden]
    w_out: np.ndarray  # [hidden, ffn]

    def __post_init__(self):
        ffn, hidden = self.w_in.shape
        if self.w_gate.shape != (ffn, hidden) or self.w_out.shape != (hidden, ffn):
            raise ShapeError(
                f"inconsistent expert shapes {self.w_in.shape}, {self.w_gate.shape}, {self.w_out.shape}"
            )
        for w in (self.w_in, self.w_gate, self.w_out):
            if not np.all(np.isfinite(w)):
                raise ShapeError("expert weights must be finite")

    @property
    def hidden_dim(self) -> int:
        return self.w_in.shape[1]


@dataclass(frozen=True, eq=False)
class RouterWeights:
    layers: tuple  # one [experts, hidden] matrix per layer

    def __post_init__(self):
        for w in self.layers:
            if not np.all(np.isfinite(w)):
                raise ShapeError("router weights must be finite")


@dataclass(frozen=True, eq=False)
class ModelWeights:
    experts: tuple  # experts[layer][expert] -> ExpertWeights
    router: RouterWeights


def init_weights(shape: ModelShape, seed: int = 0, scale: float = 1.0, zero: bool = False) -> ModelWeights:
    """Random (or all-zero) toy weights, fan-in scaled."""
    rng = np.random.default_rng(seed)
    h, f = shape.hidden_dim, shape.ffn_dim

    def mat(rows, cols):
        if zero:
            return np.zeros((rows, cols))
        return rng.standard_normal((rows, cols)) * (scale / math.sqrt(cols))

    experts = tuple(
        tuple(ExpertWeights(mat(f, h), mat(f, h), mat(h, f)) for _ in range(shape.experts_per_layer))
        for _ in range(shape.num_layers)
    )
    router = RouterWeights(tuple(mat(shape.experts_per_layer, h) for _ in range(shape.num_layers)))
    return ModelWeights(experts, router)


def silu(x):
    """x * sigmoid(x); works on scalars and arrays."""
    x = np.asarray(x, dtype=float)
    out = x * np.exp(-np.logaddexp(0.0, -x))  # overflow-free sigmoid
    return float(out) if out.ndim == 0 else out


def expert_ffn(weights: ExpertWeights, x: np.ndarray) -> np.ndarray:
    """Gated FFN ``w_out @ (silu(w_in @ x) * (w_gate @ x))``.

    ``x`` may be a single vector or a ``[tokens, hidden]`` matrix.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != weights.hidden_dim:
        raise ShapeError(f"input width {x.shape[-1]} != hidden_dim {weights.hidden_dim}")
    act = silu(x @ weights.w_in.T) * (x @ weights.w_gate.T)
    return act @ weights.w_out.T


def _topk_rows(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row top-k ids (lower id wins ties) and renormalised softmax weights."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    chosen = np.take_along_axis(logits, order, axis=-1)
    z = np.exp(chosen - chosen.max(axis=-1, keepdims=True))
    return order, z / z.sum(axis=-1, keepdims=True)


def gate_topk(router: RouterWeights, layer: int, x: np.ndarray, top_k: int) -> list[tuple[int, float]]:
    w = router.layers[layer]
    x = np.asarray(x, dtype=float)
    if x.shape != (w.shape[1],):
        raise ShapeError(f"expected vector of width {w.shape[1]}, got {x.shape}")
    ids, gw = _topk_rows((w @ x)[None, :], top_k)
    return [(int(e), float(g)) for e, g in zip(ids[0], gw[0])]


# -- traces -------------------------------------------------------------------


class Selection(NamedTuple):
    expert: int
    token_count: int
    gate_weight: float


@dataclass(frozen=True)
class Step:
    kind: str
    layers: tuple  # layers[l] -> tuple[Selection, ...]

    def counts(self, layer: int, experts_per_layer: int) -> tuple[int, ...]:
        n = [0] * experts_per_layer
        for s in self.layers[layer]:
            n[s.expert] += s.token_count
        return tuple(n)


@dataclass(frozen=True)
class RoutingTrace:
    steps: tuple = ()

    def __len__(self):
        return len(self.steps)

    @property
    def prefill_steps(self):
        return [s for s in self.steps if s.kind == PREFILL]

    @property
    def decode_steps(self):
        return [s for s in self.steps if s.kind == DECODE]


def validate_trace(trace: RoutingTrace, shape: ModelShape) -> None:
    """Raise ``TraceInvalidError`` on the first violated invariant."""
    k = shape.top_k
    for i, step in enumerate(trace.steps):
        if step.kind not in (PREFILL, DECODE):
            raise TraceInvalidError(f"step {i}: unknown kind {step.kind!r}")
        if len(step.layers) != shape.num_layers:
            raise TraceInvalidError(f"step {i}: {len(step.layers)} layers, expected {shape.num_layers}")
        n_tokens = None
        for l, sels in enumerate(step.layers):
            ids = [s.expert for s in sels]
            if len(set(ids)) != len(ids):
                raise TraceInvalidError(f"step {i} layer {l}: duplicate expert")
            for s in sels:
                if not 0 <= s.expert < shape.experts_per_layer:
                    raise TraceInvalidError(f"step {i} layer {l}: expert {s.expert} out of range")
                if s.token_count < 1:
                    raise TraceInvalidError(f"step {i} layer {l}: non-positive token count")
                if not (math.isfinite(s.gate_weight) and 0 < s.gate_weight <= 1 + 1e-12):
                    raise TraceInvalidError(f"step {i} layer {l}: gate weight {s.gate_weight} outside (0, 1]")
            if step.kind == DECODE:
                if len(sels) != k or any(s.token_count != 1 for s in sels):
                    raise TraceInvalidError(f"step {i} layer {l}: decode needs {k} selections of 1 token")
                if abs(sum(s.gate_weight for s in sels) - 1.0) > 1e-9:
                    raise TraceInvalidError(f"step {i} layer {l}: decode gate weights do not sum to 1")
            else:
                total = sum(s.token_count for s in sels)
                if total % k or total == 0:
                    raise TraceInvalidError(f"step {i} layer {l}: {total} routed tokens not a multiple of top_k")
                if n_tokens is None:
                    n_tokens = total // k
                elif total != n_tokens * k:
                    raise TraceInvalidError(f"step {i} layer {l}: token total differs across layers")
                if len(sels) < k or any(s.token_count > n_tokens for s in sels):
                    raise TraceInvalidError(f"step {i} layer {l}: selection counts inconsistent with top_k")


def prefill_tokens(step: Step, top_k: int) -> int:
    if step.kind == DECODE:
        return 1
    return sum(s.token_count for s in step.layers[0]) // top_k if step.layers else 0


def _aggregate_step(kind: str, ids: np.ndarray, gates: np.ndarray) -> Step:
    """``ids``/``gates`` are [tokens, layers, k]; collapse to per-expert selections."""
    layers = []
    for l in range(ids.shape[1]):
        flat_ids = ids[:, l, :].ravel()
        flat_g = gates[:, l, :].ravel()
        sels = []
        for e in np.unique(flat_ids):
            mask = flat_ids == e
            sels.append(Selection(int(e), int(mask.sum()), float(flat_g[mask].mean())))
        layers.append(tuple(sels))
    return Step(kind, tuple(layers))


def model_forward(
    shape: ModelShape, weights: ModelWeights, tokens: np.ndarray, kind: str = PREFILL
) -> tuple[np.ndarray, RoutingTrace]:
    """Apply every MoE layer (gate, experts, weighted combine, residual).

    Returns the outputs and a one-step trace describing the routing.
    """
    x = np.asarray(tokens, dtype=float)
    if x.ndim != 2 or x.shape[1] != shape.hidden_dim:
        raise ShapeError(f"tokens must be [n, {shape.hidden_dim}], got {x.shape}")
    if kind == DECODE and x.shape[0] != 1:
        raise ShapeError("a decode step carries exactly one token")
    if shape.num_layers == 0:
        return x.copy(), RoutingTrace()
    all_ids, all_gates = [], []
    for l in range(shape.num_layers):
        ids, gates = route_layer(shape, weights, l, x)
        outs = {e: expert_ffn(weights.experts[l][e], x[rows]) for e, rows in expert_rows(ids).items()}
        x = combine(x, ids, gates, outs)
        all_ids.append(ids)
        all_gates.append(gates)
    step = _aggregate_step(kind, np.stack(all_ids, axis=1), np.stack(all_gates, axis=1))
    return x, RoutingTrace((step,))


def route_layer(shape: ModelShape, weights: ModelWeights, layer: int, x: np.ndarray):
    return _topk_rows(x @ weights.router.layers[layer].T, shape.top_k)


def expert_rows(ids: np.ndarray) -> dict[int, np.ndarray]:
    """Token rows routed to each expert, experts in ascending id order."""
    return {int(e): np.nonzero((ids == e).any(axis=1))[0] for e in np.unique(ids)}


def combine(x: np.ndarray, ids: np.ndarray, gates: np.ndarray, outs: dict[int, np.ndarray]) -> np.ndarray:
    """Residual add of gate-weighted expert outputs, summed in rank order.

    The summation order depends only on the routing, never on where or in
    which order the expert outputs in ``outs`` were produced.
    """
    y = x.copy()
    rows = expert_rows(ids)
    pos = {e: {int(r): i for i, r in enumerate(rr)} for e, rr in rows.items()}
    for t in range(x.shape[0]):
        for j in range(ids.shape[1]):
            e = int(ids[t, j])
            y[t] += gates[t, j] * outs[e][pos[e][t]]
    return y


def post_silu_activations(shape: ModelShape, weights: ModelWeights, tokens: np.ndarray) -> list[np.ndarray]:
    """Per-layer flat array of ``silu(w_in @ x)`` over every routed (token, expert)."""
    x = np.asarray(tokens, dtype=float)
    per_layer = []
    for l in range(shape.num_layers):
        ids, gates = route_layer(shape, weights, l, x)
        rows = expert_rows(ids)
        acts, outs = [], {}
        for e, rr in rows.items():
            w = weights.experts[l][e]
            a = silu(x[rr] @ w.w_in.T)
            acts.append(a.ravel())
            outs[e] = (a * (x[rr] @ w.w_gate.T)) @ w.w_out.T
        per_layer.append(np.concatenate(acts) if acts else np.zeros(0))
        x = combine(x, ids, gates, outs)
    return per_layer


def synth_trace(
    shape: ModelShape,
    popularity_skew: float,
    input_len: int,
    output_len: int,
    seed: int,
    model_seed: int = 0,
) -> RoutingTrace:
    """Synthetic routing: one prefill step then ``output_len`` decode steps.

    Each layer has a fixed categorical popularity ``softmax(skew * z)`` with
    ``z`` drawn from ``model_seed`` (so traces with different ``seed`` share
    one model's popularity). Top-k experts per token are drawn without
    replacement via Gumbel top-k. The RNG stream is consumed prefill-first,
    so traces that differ only in ``output_len`` are prefixes of each other.
    """
    if input_len < 1 or output_len < 0:
        raise ValueError("need input_len >= 1 and output_len >= 0")
    L, E, k = shape.num_layers, shape.experts_per_layer, shape.top_k
    z = np.random.default_rng(model_seed).standard_normal((L, E))
    logp = popularity_skew * z
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    rng = np.random.default_rng(seed)

    def draw(n):
        keys = logp[None, :, :] + rng.gumbel(size=(n, L, E))
        return _topk_rows(keys, k)

    ids, gates = draw(input_len)
    steps = [_aggregate_step(PREFILL, ids, gates)]
    if output_len:
        ids, gates = draw(output_len)
        for t in range(output_len):
            steps.append(
                Step(
                    DECODE,
                    tuple(
                        tuple(Selection(int(e), 1, float(g)) for e, g in zip(ids[t, l], gates[t, l]))
                        for l in range(L)
                    ),
                )
            )
    return RoutingTrace(tuple(steps))


# -- JSON Lines I/O -----------------------------------------------------------


def trace_to_jsonl(trace: RoutingTrace) -> str:
    lines = []
    for step in trace.steps:
        rec = {"kind": step.kind, "layers": [[[s.expert, s.token_count, s.gate_weight] for s in sels] for sels in step.layers]}
        lines.append(json.dumps(rec))
    return "".join(line + "\n" for line in lines)


def parse_trace_jsonl(lines: Iterable[str], shape: ModelShape) -> RoutingTrace:
    steps = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            layers = tuple(
                tuple(Selection(int(e), int(n), float(g)) for e, n, g in sels) for sels in rec["layers"]
            )
            steps.append(Step(rec["kind"], layers))
        except (ValueError, KeyError, TypeError) as exc:
            raise TraceInvalidError(f"line {lineno}: malformed step ({exc})") from exc
    trace = RoutingTrace(tuple(steps))
    validate_trace(trace, shape)
    return trace


def save_trace(trace: RoutingTrace, path) -> None:
    Path(path).write_text(trace_to_jsonl(trace))


def load_trace(path, shape: ModelShape) -> RoutingTrace:
    with open(path) as fh:
        return parse_trace_jsonl(fh, shape)


def make_step(kind: str, per_layer: Sequence[Sequence[tuple[int, int, float]]]) -> Step:
    return Step(kind, tuple(tuple(Selection(*s) for s in sels) for sels in per_layer))
