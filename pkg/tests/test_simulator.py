import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moe_orch.cost_model import DEFAULT_COST_MODEL, CostModel, decode_assumption_check
from moe_orch.errors import DataError, InvalidStepError, UndefinedRateError
from moe_orch.moe_core import (
    DECODE, MIXTRAL, PREFILL, TOY, ModelShape, RoutingTrace, init_weights, make_step, model_forward, synth_trace,
)
from moe_orch.placement import Placement, greedy_place, uniform_profile
from moe_orch.scheduler import LayerDemand
from moe_orch.simulator import (
    DecodeAssumptionWarning,
    Policy,
    parse_policies,
    plan_trace,
    run_grid,
    scheduled_forward,
    simulate_generation,
    simulate_step,
    step_demands,
)

HAND_COST = CostModel(
    weight_copy_ms=50, fast_exec_ms=5, activation_copy_ms=0.05, slow_ms_per_token=6, nonexpert_ms_per_step=10
)
EMPTY = Placement(frozenset(), 0)
ALL_TOY = Placement(frozenset((l, e) for l in range(4) for e in range(8)), 32)


def _decode_demands(layers, experts=(0, 1), E=8):
    return [LayerDemand(l, [1 if e in experts else 0 for e in range(E)]) for l in range(layers)]


def test_fiddler_all_resident_decode_step():
    ms, plans = simulate_step(_decode_demands(4), ALL_TOY, HAND_COST, Policy.FIDDLER, decode=True)
    assert ms == 80.0  # 4 x (2 x 5 + 10)
    assert all(not p.cpu_expert for p in plans)


def test_expert_copy_zero_hit_decode_step():
    ms, _ = simulate_step(_decode_demands(32), EMPTY, HAND_COST, Policy.EXPERT_COPY, decode=True)
    assert ms == 3840.0  # 32 x (2 x 55 + 10)
    assert 1000 / ms == pytest.approx(0.26, abs=0.005)


def test_fiddler_zero_hit_decode_step():
    ms, _ = simulate_step(_decode_demands(32), EMPTY, HAND_COST, Policy.FIDDLER, decode=True)
    assert ms == pytest.approx(707.2, abs=1e-9)  # 32 x (2 x 6 + 0.1 + 10)


def test_full_stream_ignores_residency():
    a, _ = simulate_step(_decode_demands(4), ALL_TOY, HAND_COST, Policy.FULL_STREAM, decode=True)
    b, _ = simulate_step(_decode_demands(4), EMPTY, HAND_COST, Policy.FULL_STREAM, decode=True)
    assert a == b == 4 * (2 * 55 + 10)


def test_prefill_step_accounting():
    # one layer, experts 0 (resident, 5 tokens) and 1 (missing, 3 tokens)
    cost = CostModel(weight_copy_ms=50, fast_exec_ms=5, activation_copy_ms=0.5, slow_ms_per_token=10, nonexpert_ms_per_step=1)
    pl = Placement(frozenset({(0, 0)}), 1)
    d = [LayerDemand(0, (5, 3))]
    ms, plans = simulate_step(d, pl, cost, Policy.FIDDLER, decode=False)
    assert plans[0].cpu_expert == {1}
    assert ms == max(30 + 1.0, 5) + 1
    ms, _ = simulate_step(d, pl, cost, Policy.EXPERT_COPY, decode=False)
    assert ms == 5 + 55 + 1


def test_missing_cost_model():
    with pytest.raises(DataError):
        simulate_step(_decode_demands(1), EMPTY, None, Policy.FIDDLER, decode=True)


def test_generation_requires_decode_steps():
    t = synth_trace(TOY, 0.0, 4, 0, seed=0)
    with pytest.raises(UndefinedRateError):
        simulate_generation(t, TOY, EMPTY, DEFAULT_COST_MODEL, Policy.FIDDLER)
    with pytest.raises(DataError):
        simulate_generation(RoutingTrace(), TOY, EMPTY, DEFAULT_COST_MODEL, Policy.FIDDLER)


def test_generation_must_start_with_prefill():
    step = make_step(DECODE, [[(0, 1, 0.5), (1, 1, 0.5)]] * 4)
    with pytest.raises(InvalidStepError):
        simulate_generation(RoutingTrace((step, step)), TOY, EMPTY, DEFAULT_COST_MODEL, Policy.FIDDLER)


def test_single_decode_step_report():
    t = synth_trace(TOY, 0.0, 4, 1, seed=0)
    r = simulate_generation(t, TOY, EMPTY, DEFAULT_COST_MODEL, Policy.FIDDLER)
    assert r.decode_ms == r.step_latencies[1]
    assert r.prefill_ms == r.step_latencies[0]
    assert r.input_len == 4 and r.output_len == 1
    assert r.tokens_per_second == pytest.approx(1 / ((r.prefill_ms + r.decode_ms) / 1000))
    assert all(ms > 0 for ms in r.step_latencies)


def test_generation_is_deterministic():
    t = synth_trace(MIXTRAL, 0.2, 32, 64, seed=3)
    pl = greedy_place(uniform_profile(32, 8), 56)
    a = simulate_generation(t, MIXTRAL, pl, DEFAULT_COST_MODEL, Policy.FIDDLER)
    b = simulate_generation(t, MIXTRAL, pl, DEFAULT_COST_MODEL, Policy.FIDDLER)
    assert a == b


def test_warns_when_decode_assumption_fails():
    bad = dataclasses.replace(DEFAULT_COST_MODEL, slow_ms_per_token=100)
    assert not decode_assumption_check(bad)
    with pytest.warns(DecodeAssumptionWarning):
        simulate_generation(synth_trace(TOY, 0.0, 2, 2, seed=0), TOY, EMPTY, bad, Policy.FIDDLER)


def _random_placement(rng, shape, cap):
    pairs = [(l, e) for l in range(shape.num_layers) for e in range(shape.experts_per_layer)]
    idx = rng.choice(len(pairs), size=cap, replace=False)
    return Placement(frozenset(pairs[i] for i in idx), cap)


def test_fiddler_beats_expert_copy_on_random_traces():
    rng = np.random.default_rng(99)
    for i in range(100):
        shape = ModelShape(int(rng.integers(1, 9)), 8, int(rng.integers(1, 4)), 4, 4)
        pl = _random_placement(rng, shape, int(rng.integers(0, shape.total_experts + 1)))
        t = synth_trace(shape, float(rng.uniform(0, 2)), int(rng.integers(1, 64)), int(rng.integers(1, 40)), seed=i)
        f = simulate_generation(t, shape, pl, DEFAULT_COST_MODEL, Policy.FIDDLER)
        e = simulate_generation(t, shape, pl, DEFAULT_COST_MODEL, Policy.EXPERT_COPY)
        s = simulate_generation(t, shape, pl, DEFAULT_COST_MODEL, Policy.FULL_STREAM)
        assert f.tokens_per_second >= e.tokens_per_second
        assert s.tokens_per_second <= e.tokens_per_second


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 3),
    st.integers(0, 2**31),
    st.floats(0.1, 50),
    st.floats(0, 1),
)
def test_per_step_policy_dominance(layers, k, seed, slope, act):
    shape = ModelShape(layers, 8, k, 4, 4)
    cost = dataclasses.replace(DEFAULT_COST_MODEL, slow_ms_per_token=slope, activation_copy_ms=act)
    if not decode_assumption_check(cost):
        return
    rng = np.random.default_rng(seed)
    pl = _random_placement(rng, shape, int(rng.integers(0, shape.total_experts + 1)))
    t = synth_trace(shape, 0.5, 3, 5, seed=seed)
    for step in t.steps:
        ds = step_demands(step, 8)
        dec = step.kind == DECODE
        f, _ = simulate_step(ds, pl, cost, Policy.FIDDLER, dec)
        e, _ = simulate_step(ds, pl, cost, Policy.EXPERT_COPY, dec)
        s, _ = simulate_step(ds, pl, cost, Policy.FULL_STREAM, dec)
        if dec:
            assert f <= e
        assert s >= e


def test_plan_trace_shapes():
    t = synth_trace(TOY, 0.3, 8, 3, seed=1)
    plans = plan_trace(t, TOY, EMPTY, DEFAULT_COST_MODEL)
    assert len(plans) == 4
    assert [p["kind"] for p in plans] == [PREFILL] + [DECODE] * 3
    for rec in plans:
        assert len(rec["layers"]) == 4
        for lp in rec["layers"]:
            assert set(lp) == {"layer", "cpu", "gpu", "predicted_ms"}


def test_parse_policies():
    assert parse_policies("fiddler, ExpertCopy") == [Policy.FIDDLER, Policy.EXPERT_COPY]
    with pytest.raises(DataError):
        parse_policies("fiddler,deepspeed")


SMALL = dict(input_lens=(4, 8), output_lens=(2, 4, 8))


def test_grid_identical_policies_speedup_one():
    g = run_grid(TOY, EMPTY, DEFAULT_COST_MODEL, [Policy.FIDDLER, Policy.EXPERT_COPY], seed=1, **SMALL)
    assert g.speedup(Policy.FIDDLER, Policy.FIDDLER) == 1.0
    assert len(g.reports["fiddler"]) == 6


def test_grid_parallel_equals_sequential():
    pols = [Policy.FIDDLER, Policy.EXPERT_COPY, Policy.FULL_STREAM]
    pl = greedy_place(uniform_profile(4, 8), 9)
    a = run_grid(TOY, pl, DEFAULT_COST_MODEL, pols, seed=4, skew=0.8, **SMALL)
    b = run_grid(TOY, pl, DEFAULT_COST_MODEL, pols, seed=4, skew=0.8, workers=4, **SMALL)
    assert a.reports == b.reports
    assert a.to_csv() == b.to_csv()
    assert a.to_json() == b.to_json()


def test_grid_summary_contents():
    g = run_grid(TOY, EMPTY, DEFAULT_COST_MODEL, [Policy.FIDDLER, Policy.EXPERT_COPY], seed=1, **SMALL)
    s = g.summary_dict()
    assert s["configs"] == 6
    assert set(s["speedups"]) == {"fiddler/expertcopy", "expertcopy/fiddler"}
    assert s["speedups"]["fiddler/expertcopy"] == pytest.approx(
        np.mean([a.tokens_per_second / b.tokens_per_second for a, b in zip(g.reports["fiddler"], g.reports["expertcopy"])])
    )
    assert g.to_csv().splitlines()[0] == "policy,input_len,output_len,prefill_ms,decode_ms,tokens_per_second"


def test_grid_rejects_empty_lists():
    with pytest.raises(DataError):
        run_grid(TOY, EMPTY, DEFAULT_COST_MODEL, [Policy.FIDDLER], input_lens=())


@pytest.mark.parametrize("policy", list(Policy))
def test_scheduled_forward_is_bit_identical(policy):
    w = init_weights(TOY, seed=8)
    rng = np.random.default_rng(8)
    for n in (1, 7, 33):
        x = rng.standard_normal((n, TOY.hidden_dim))
        ref, _ = model_forward(TOY, w, x, kind=DECODE if n == 1 else PREFILL)
        for cap in (0, 5, 32):
            pl = _random_placement(rng, TOY, cap)
            assert np.array_equal(scheduled_forward(TOY, w, x, pl, DEFAULT_COST_MODEL, policy), ref)
