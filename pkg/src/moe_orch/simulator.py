"""Deterministic latency replay of routing traces under offloading policies.

Within a layer the slow and fast devices run in parallel (max); layers run
one after another (sum). The simulator only reads routing decisions from the
trace and never touches model math.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cost_model import CostModel, decode_assumption_check
from .errors import DataError, InvalidStepError, UndefinedRateError
from .moe_core import DECODE, ModelShape, RoutingTrace, Step, combine, expert_ffn, expert_rows, route_layer
from .placement import Placement
from .scheduler import CALIBRATED, LayerDemand, LayerPlan, Mode, plan_decode, plan_prefill

INPUT_LENS = (16, 32, 64, 128)
OUTPUT_LENS = (16, 32, 64, 128, 256, 512)


class Policy(str, enum.Enum):
    FIDDLER = "fiddler"
    EXPERT_COPY = "expertcopy"
    FULL_STREAM = "fullstream"


class DecodeAssumptionWarning(UserWarning):
    pass


def parse_policies(text: str) -> list[Policy]:
    try:
        return [Policy(p.strip().lower()) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise DataError(f"unknown policy in {text!r}; choose from {[p.value for p in Policy]}") from exc


def step_demands(step: Step, experts_per_layer: int) -> list[LayerDemand]:
    return [LayerDemand(l, step.counts(l, experts_per_layer)) for l in range(len(step.layers))]


def layer_latency(
    demand: LayerDemand, placement: Placement, cost: CostModel, policy: Policy, decode: bool, mode: Mode = CALIBRATED
) -> tuple[float, LayerPlan | None]:
    """Expert latency of one layer (without the non-expert constant)."""
    l = demand.layer
    if policy is Policy.FIDDLER:
        plan = plan_decode(demand, placement, cost, mode) if decode else plan_prefill(demand, placement, cost, mode)
        slow = sum(cost.slow_cost(demand.n_input[i]) for i in sorted(plan.cpu_expert))
        if plan.cpu_expert:
            slow += 2 * cost.activation_copy_ms
        fast = sum(
            cost.fast_exec_ms if placement.is_resident(l, i) else cost.fast_miss_ms for i in sorted(plan.gpu_expert)
        )
        return max(slow, fast), plan
    if policy is Policy.EXPERT_COPY:
        return (
            sum(cost.fast_exec_ms if placement.is_resident(l, i) else cost.fast_miss_ms for i in demand.active),
            None,
        )
    if policy is Policy.FULL_STREAM:
        return len(demand.active) * cost.fast_miss_ms, None
    raise ValueError(f"unknown policy {policy!r}")


def simulate_step(
    demands: Sequence[LayerDemand],
    placement: Placement,
    cost: CostModel,
    policy: Policy,
    decode: bool,
    mode: Mode = CALIBRATED,
) -> tuple[float, list[LayerPlan]]:
    """Step latency in ms and the per-layer plans (Fiddler only)."""
    if cost is None:
        raise DataError("simulation needs a calibrated cost model")
    total = 0.0
    plans = []
    for d in demands:
        ms, plan = layer_latency(d, placement, cost, Policy(policy), decode, mode)
        total += ms + cost.nonexpert_ms_per_step
        if plan is not None:
            plans.append(plan)
    return total, plans


@dataclass(frozen=True)
class SimReport:
    policy: str
    input_len: int
    output_len: int
    prefill_ms: float
    decode_ms: float
    tokens_per_second: float
    step_latencies: tuple = field(default=(), repr=False)

    @property
    def decode_tokens_per_second(self) -> float:
        return self.output_len / (self.decode_ms / 1000.0)


def simulate_generation(
    trace: RoutingTrace,
    shape: ModelShape,
    placement: Placement,
    cost: CostModel,
    policy: Policy,
    mode: Mode = CALIBRATED,
    plan_sink: list | None = None,
) -> SimReport:
    """Replay every step of ``trace``; tokens/s counts decode steps over total time.

    ``plan_sink``, when given, receives one dict per step with the Fiddler plans.
    """
    policy = Policy(policy)
    if not trace.steps:
        raise DataError("cannot simulate an empty trace")
    if trace.steps[0].kind == DECODE:
        raise InvalidStepError("trace must start with a prefill step")
    if policy is Policy.FIDDLER and not decode_assumption_check(cost):
        warnings.warn(
            "slow-device decode is not cheaper than copying weights under this cost model",
            DecodeAssumptionWarning,
            stacklevel=2,
        )
    E = shape.experts_per_layer
    prefill_ms = decode_ms = 0.0
    latencies = []
    input_len = output_len = 0
    for i, step in enumerate(trace.steps):
        decode = step.kind == DECODE
        ms, plans = simulate_step(step_demands(step, E), placement, cost, policy, decode, mode)
        latencies.append(ms)
        if decode:
            decode_ms += ms
            output_len += 1
        else:
            prefill_ms += ms
            input_len += sum(s.token_count for s in step.layers[0]) // shape.top_k if step.layers else 0
        if plan_sink is not None and plans:
            plan_sink.append({"step": i, "kind": step.kind, "layers": [p.to_dict() for p in plans]})
    if output_len == 0:
        raise UndefinedRateError("tokens per second undefined: trace has no decode steps")
    tps = output_len / ((prefill_ms + decode_ms) / 1000.0)
    return SimReport(policy.value, input_len, output_len, prefill_ms, decode_ms, tps, tuple(latencies))


def plan_trace(
    trace: RoutingTrace, shape: ModelShape, placement: Placement, cost: CostModel, mode: Mode = CALIBRATED
) -> list[dict]:
    """Fiddler's per-layer plans for every step, as plain dicts."""
    out = []
    for i, step in enumerate(trace.steps):
        _, plans = simulate_step(step_demands(step, shape.experts_per_layer), placement, cost, Policy.FIDDLER, step.kind == DECODE, mode)
        out.append({"step": i, "kind": step.kind, "layers": [p.to_dict() for p in plans]})
    return out


def scheduled_forward(
    shape: ModelShape,
    weights,
    tokens: np.ndarray,
    placement: Placement,
    cost: CostModel,
    policy: Policy,
) -> np.ndarray:
    """Run the toy model executing experts grouped by the device the policy picks.

    Slow-device experts run first, then fast-device ones; outputs are merged
    through the same combine as ``model_forward`` so the result is identical.
    """
    x = np.asarray(tokens, dtype=float)
    decode = x.shape[0] == 1
    for l in range(shape.num_layers):
        ids, gates = route_layer(shape, weights, l, x)
        rows = expert_rows(ids)
        counts = [0] * shape.experts_per_layer
        for e, rr in rows.items():
            counts[e] = len(rr)
        _, plan = layer_latency(LayerDemand(l, counts), placement, cost, Policy(policy), decode)
        if plan is None:
            order = sorted(rows)
        else:
            order = sorted(plan.cpu_expert) + sorted(plan.gpu_expert)
        outs = {e: expert_ffn(weights.experts[l][e], x[rows[e]]) for e in order}
        x = combine(x, ids, gates, outs)
    return x


# -- grid -----------------------------------------------------------------------


@dataclass
class GridSummary:
    reports: dict  # policy value -> list[SimReport] in config order
    input_lens: tuple
    output_lens: tuple

    @property
    def policies(self) -> list[str]:
        return list(self.reports)

    def average_tps(self, policy) -> float:
        return float(np.mean([r.tokens_per_second for r in self.reports[Policy(policy).value]]))

    def speedup(self, a, b) -> float:
        """Mean over configs of tokens/s of ``a`` divided by tokens/s of ``b``."""
        ra, rb = self.reports[Policy(a).value], self.reports[Policy(b).value]
        return float(np.mean([x.tokens_per_second / y.tokens_per_second for x, y in zip(ra, rb)]))

    def amortization(self) -> dict:
        """Per policy and input length: is tokens/s non-decreasing in output length?"""
        out = {}
        for p, reps in self.reports.items():
            out[p] = {}
            for il in self.input_lens:
                tps = [r.tokens_per_second for r in reps if r.input_len == il]
                out[p][il] = all(b >= a for a, b in zip(tps, tps[1:]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "input_len", "output_len", "prefill_ms", "decode_ms", "tokens_per_second"])
        for p, reps in self.reports.items():
            for r in reps:
                w.writerow([p, r.input_len, r.output_len, f"{r.prefill_ms:.6f}", f"{r.decode_ms:.6f}", f"{r.tokens_per_second:.6f}"])
        return buf.getvalue()

    def summary_dict(self) -> dict:
        pols = self.policies
        return {
            "note": (
                "baselines are abstract latency models; the expert-copy baseline has no caching "
                "or prefetching, so speedups over it lean optimistic"
            ),
            "configs": len(self.input_lens) * len(self.output_lens),
            "input_lens": list(self.input_lens),
            "output_lens": list(self.output_lens),
            "average_tokens_per_second": {p: self.average_tps(p) for p in pols},
            "speedups": {f"{a}/{b}": self.speedup(a, b) for a, b in itertools.permutations(pols, 2)},
            "amortized": {p: {str(k): v for k, v in d.items()} for p, d in self.amortization().items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary_dict(), indent=2, sort_keys=True) + "\n"


def config_seed(seed: int, input_len: int) -> int:
    """Trace seed for one input length; output lengths share it so shorter
    generations are prefixes of longer ones."""
    return int(np.random.SeedSequence([seed, input_len]).generate_state(1)[0])


def run_grid(
    shape: ModelShape,
    placement: Placement,
    cost: CostModel,
    policies: Sequence[Policy],
    seed: int = 0,
    input_lens: Sequence[int] = INPUT_LENS,
    output_lens: Sequence[int] = OUTPUT_LENS,
    skew: float = 0.0,
    model_seed: int = 0,
    workers: int = 1,
    mode: Mode = CALIBRATED,
) -> GridSummary:
    from .moe_core import synth_trace

    if not input_lens or not output_lens or not policies:
        raise DataError("grid lists and policy list must be non-empty")
    policies = [Policy(p) for p in policies]
    configs = [(i, o) for i in input_lens for o in output_lens]

    def one(cfg):
        il, ol = cfg
        trace = synth_trace(shape, skew, il, ol, config_seed(seed, il), model_seed=model_seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DecodeAssumptionWarning)
            return {p.value: simulate_generation(trace, shape, placement, cost, p, mode) for p in policies}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, configs))
    else:
        results = [one(c) for c in configs]
    reports = {p.value: [r[p.value] for r in results] for p in policies}
    return GridSummary(reports, tuple(input_lens), tuple(output_lens))
