"""Per-layer device assignment for expert execution.

Decode steps use a fixed rule: resident experts on the fast device, missing
ones on the slow device. Prefill steps split the active experts so that the
larger of the two device-side sums is as small as possible; the two devices
run concurrently, so that maximum is the layer latency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

from .cost_model import CostModel
from .errors import EnumerationBoundError, InvalidAssignmentError, InvalidStepError
from .placement import Placement

Mode = Literal["paper_faithful", "calibrated"]
PAPER_FAITHFUL: Mode = "paper_faithful"
CALIBRATED: Mode = "calibrated"

MAX_EXACT_EXPERTS = 20


@dataclass(frozen=True)
class LayerDemand:
    layer: int
    n_input: tuple  # tokens routed to each expert of the layer

    def __post_init__(self):
        object.__setattr__(self, "n_input", tuple(int(n) for n in self.n_input))
        if any(n < 0 for n in self.n_input):
            raise InvalidStepError("n_input must be non-negative")

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.n_input) if n > 0)

    @property
    def is_decode(self) -> bool:
        return all(n <= 1 for n in self.n_input)


@dataclass(frozen=True)
class LayerPlan:
    layer: int
    cpu_expert: frozenset
    gpu_expert: frozenset
    predicted_ms: float
    slow_sum_ms: float
    fast_sum_ms: float

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "cpu": sorted(self.cpu_expert),
            "gpu": sorted(self.gpu_expert),
            "predicted_ms": self.predicted_ms,
        }


def _side_costs(cost: CostModel, mode: Mode) -> tuple:
    if mode == PAPER_FAITHFUL:
        return (lambda n: n * cost.slow_ms_per_token), cost.weight_copy_ms
    if mode == CALIBRATED:
        return cost.slow_cost, cost.fast_miss_ms
    raise ValueError(f"unknown mode {mode!r}")


def objective(
    demand: LayerDemand,
    cpu_expert: Iterable[int],
    gpu_expert: Iterable[int],
    placement: Placement,
    cost: CostModel,
    mode: Mode = PAPER_FAITHFUL,
) -> tuple[float, float, float]:
    """(slow_sum_ms, fast_sum_ms, predicted_ms) for one assignment.

    In ``paper_faithful`` mode the slow side is ``n * slow_ms_per_token`` and a
    missing expert on the fast side costs ``weight_copy_ms``. In ``calibrated``
    mode the slow side uses the fitted intercept too and a missing expert costs
    copy plus execution. Resident experts cost nothing on the fast side in
    either mode.
    """
    cpu, gpu = set(cpu_expert), set(gpu_expert)
    active = set(demand.active)
    if cpu & gpu:
        raise InvalidAssignmentError(f"experts {sorted(cpu & gpu)} assigned to both devices")
    if cpu | gpu != active:
        extra, missing = (cpu | gpu) - active, active - (cpu | gpu)
        raise InvalidAssignmentError(f"assignment must cover exactly the active experts (extra={sorted(extra)}, missing={sorted(missing)})")
    slow_fn, miss_ms = _side_costs(cost, mode)
    slow = sum(slow_fn(demand.n_input[i]) for i in sorted(cpu))
    fast = sum(miss_ms for i in sorted(gpu) if not placement.is_resident(demand.layer, i))
    return float(slow), float(fast), float(max(slow, fast))


def _plan(demand, cpu, gpu, placement, cost, mode) -> LayerPlan:
    slow, fast, pred = objective(demand, cpu, gpu, placement, cost, mode)
    return LayerPlan(demand.layer, frozenset(cpu), frozenset(gpu), pred, slow, fast)


def plan_prefill_exact(
    demand: LayerDemand, placement: Placement, cost: CostModel, mode: Mode = PAPER_FAITHFUL
) -> LayerPlan:
    """Exhaustive search over all splits of the active experts.

    Ties go to the smaller fast-side sum, then the smaller slow-side sum,
    then the lexicographically smallest sorted CPU set.
    """
    active = demand.active
    k = len(active)
    if k > MAX_EXACT_EXPERTS:
        raise EnumerationBoundError(f"{k} active experts exceed the exact bound {MAX_EXACT_EXPERTS}; use plan_prefill_greedy")
    slow_fn, miss_ms = _side_costs(cost, mode)
    slow_c = [float(slow_fn(demand.n_input[i])) for i in active]
    fast_c = [0.0 if placement.is_resident(demand.layer, i) else float(miss_ms) for i in active]

    best_key, best_mask = None, 0
    for mask in range(1 << k):
        slow = fast = 0.0
        cpu = []
        for j in range(k):
            if mask >> j & 1:
                slow += slow_c[j]
                cpu.append(active[j])
            else:
                fast += fast_c[j]
        key = (max(slow, fast), fast, slow, tuple(cpu))
        if best_key is None or key < best_key:
            best_key, best_mask = key, mask
    cpu = [active[j] for j in range(k) if best_mask >> j & 1]
    gpu = [active[j] for j in range(k) if not best_mask >> j & 1]
    return _plan(demand, cpu, gpu, placement, cost, mode)


def plan_prefill_greedy(
    demand: LayerDemand, placement: Placement, cost: CostModel, mode: Mode = PAPER_FAITHFUL
) -> LayerPlan:
    """Largest-first list scheduling onto the side with the smaller resulting max."""
    slow_fn, miss_ms = _side_costs(cost, mode)
    gpu = [i for i in demand.active if placement.is_resident(demand.layer, i)]
    missing = [i for i in demand.active if not placement.is_resident(demand.layer, i)]
    missing.sort(key=lambda i: (-demand.n_input[i], i))
    cpu = []
    slow = fast = 0.0
    for i in missing:
        s = slow_fn(demand.n_input[i])
        if max(slow + s, fast) <= max(slow, fast + miss_ms):
            cpu.append(i)
            slow += s
        else:
            gpu.append(i)
            fast += miss_ms
    return _plan(demand, cpu, gpu, placement, cost, mode)


def plan_prefill(demand: LayerDemand, placement: Placement, cost: CostModel, mode: Mode = PAPER_FAITHFUL) -> LayerPlan:
    """Exact search when tractable, greedy otherwise."""
    if len(demand.active) <= MAX_EXACT_EXPERTS:
        return plan_prefill_exact(demand, placement, cost, mode)
    return plan_prefill_greedy(demand, placement, cost, mode)


def plan_decode(
    demand: LayerDemand, placement: Placement, cost: CostModel | None = None, mode: Mode = PAPER_FAITHFUL
) -> LayerPlan:
    if not demand.is_decode:
        raise InvalidStepError(f"layer {demand.layer}: decode demand must route at most one token per expert")
    gpu = [i for i in demand.active if placement.is_resident(demand.layer, i)]
    cpu = [i for i in demand.active if not placement.is_resident(demand.layer, i)]
    return _plan(demand, cpu, gpu, placement, cost or CostModel(), mode)
