"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s -v`` to see the verdict lines.
"""

import time

import numpy as np
import pytest

from moe_orch import cli
from moe_orch.cost_model import (
    DEFAULT_COST_MODEL,
    CostModel,
    MicrobenchRecord,
    Workload,
    decode_assumption_check,
    fit,
    records_from_model,
)
from moe_orch.moe_core import DECODE, MIXTRAL, PREFILL, TOY, init_weights, model_forward
from moe_orch.placement import (
    Placement,
    PopularityProfile,
    expected_hit_rate,
    greedy_place,
    hit_rate_bounds,
    sparsity_histogram,
    uniform_profile,
)
from moe_orch.scheduler import CALIBRATED, PAPER_FAITHFUL, LayerDemand, plan_decode, plan_prefill_exact
from moe_orch.simulator import Policy, run_grid, scheduled_forward

from oracles import brute_force_min_objective, normal_equation_ols, subset_best_hit_rate


def verdict(n, label, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {label}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def _placement(experts):
    return Placement(frozenset((0, e) for e in experts), 256)


def test_01_prefill_solver_matches_brute_force():
    rng = np.random.default_rng(1)
    lcpu, lgpu = DEFAULT_COST_MODEL.slow_ms_per_token, DEFAULT_COST_MODEL.weight_copy_ms
    mismatches = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        n = [int(v) for v in rng.integers(0, 129, size=8)]
        resident = [bool(r) for r in rng.random(8) < 0.5]
        pl = _placement([i for i, r in enumerate(resident) if r])
        got = plan_prefill_exact(LayerDemand(0, n), pl, DEFAULT_COST_MODEL, PAPER_FAITHFUL).predicted_ms
        mismatches += got != brute_force_min_objective(n, resident, lcpu, lgpu)
    elapsed = time.perf_counter() - t0
    verdict(1, "exact prefill planner == brute force, 1000 instances", mismatches == 0 and elapsed < 5,
            f"{mismatches} mismatches, {elapsed:.2f}s")


def test_02_decode_is_prefill_specialisation():
    rng = np.random.default_rng(2)
    cost = DEFAULT_COST_MODEL
    assert decode_assumption_check(cost)
    diffs = 0
    for _ in range(1000):
        E = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(E, 4) + 1))
        chosen = set(rng.choice(E, size=k, replace=False).tolist())
        d = LayerDemand(0, [1 if e in chosen else 0 for e in range(E)])
        pl = _placement([e for e in range(E) if rng.random() < 0.4])
        a = plan_decode(d, pl, cost, CALIBRATED)
        b = plan_prefill_exact(d, pl, cost, CALIBRATED)
        diffs += (a.cpu_expert, a.gpu_expert) != (b.cpu_expert, b.gpu_expert)
    verdict(2, "plan_decode partitions == plan_prefill_exact, 1000 decode demands", diffs == 0, f"{diffs} differ")


def test_03_hit_rate_identities():
    p = uniform_profile(32, 8)
    h56 = expected_hit_rate(greedy_place(p, 56), p)
    h52 = expected_hit_rate(greedy_place(p, 52), p)
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(500):
        L, E = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        counts = rng.integers(0, 1000, size=(L, E))
        counts[0, 0] += 1
        best, worst, rnd = hit_rate_bounds(PopularityProfile(counts), int(rng.integers(0, L * E + 1)))
        bad += not (best >= rnd >= worst)
    verdict(3, "uniform 56/256 -> 0.21875, 52/256 -> 0.203125, best>=random>=worst x500",
            h56 == 0.21875 and h52 == 0.203125 and bad == 0, f"{h56}, {h52}, {bad} ordering failures")


def test_04_greedy_placement_optimal():
    rng = np.random.default_rng(4)
    bad = 0
    cases = 0
    for L, E in ((1, 12), (2, 6), (3, 4), (4, 3), (6, 2), (12, 1), (1, 5), (2, 3)):
        for cap in range(0, min(6, L * E) + 1):
            for _ in range(10):
                counts = rng.integers(0, 6, size=(L, E))  # small range forces ties
                if counts.sum() == 0:
                    counts[-1, -1] = 1
                p = PopularityProfile(counts)
                bad += expected_hit_rate(greedy_place(p, cap), p) != subset_best_hit_rate(counts.ravel().tolist(), cap)
                cases += 1
    verdict(4, "greedy hit rate == subset-enumeration optimum", bad == 0, f"{cases} instances, {bad} worse")


def test_05_cost_fit_recovery():
    base = [
        MicrobenchRecord(Workload.WEIGHT_COPY, 1, 50.0),
        MicrobenchRecord(Workload.ACTIVATION_COPY, 1, 0.02),
        MicrobenchRecord(Workload.FAST_EXEC, 1, 5.0),
    ]
    slow = [MicrobenchRecord(Workload.SLOW_EXEC, b, 1.75 + 2.5 * b) for b in (1, 2, 3, 8, 16, 64, 128)]
    m = fit(base + slow)
    oi, os_ = normal_equation_ols([r.batch_size for r in slow], [r.latency_ms for r in slow])
    ok_line = abs(m.slow_ms_per_token - 2.5) <= 1e-9 and abs(m.slow_intercept_ms - 1.75) <= 1e-9
    ok_line &= abs(oi - 1.75) <= 1e-9 and abs(os_ - 2.5) <= 1e-9

    truth = CostModel(47.5, 0.013, 4.25, 2.75, 0.6, 1.5)
    back = fit(records_from_model(truth, num_layers=3), nonexpert_ms_per_step=truth.nonexpert_ms_per_step)
    fields = ("weight_copy_ms", "activation_copy_ms", "fast_exec_ms", "slow_ms_per_token", "slow_intercept_ms", "nonexpert_ms_per_step")
    worst = max(abs(getattr(back, f) - getattr(truth, f)) for f in fields)
    verdict(5, "OLS recovers slope/intercept and six-field round trip within 1e-9",
            ok_line and worst <= 1e-9, f"round-trip max error {worst:.1e}")


@pytest.fixture(scope="module")
def mixtral_grid():
    placement = greedy_place(uniform_profile(32, 8), 56)
    t0 = time.perf_counter()
    grid = run_grid(MIXTRAL, placement, DEFAULT_COST_MODEL, list(Policy), seed=0)
    return placement, grid, time.perf_counter() - t0


def _hand_decode_ms(placement, cost, shape):
    # per layer: both selected experts resident -> 2 fast executions;
    # both missing -> slow device with activation round trip (uniform placement
    # fills whole layers, so mixed layers do not occur)
    masks = [placement.layer_mask(l, shape.experts_per_layer) for l in range(shape.num_layers)]
    assert all(all(m) or not any(m) for m in masks)
    full_layers = sum(all(m) for m in masks)
    k = shape.top_k
    resident_layer = k * cost.fast_exec_ms + cost.nonexpert_ms_per_step
    missing_layer = k * cost.slow_cost(1) + 2 * cost.activation_copy_ms + cost.nonexpert_ms_per_step
    return full_layers * resident_layer + (shape.num_layers - full_layers) * missing_layer


def test_06_speedup_band(mixtral_grid):
    placement, grid, elapsed = mixtral_grid
    assert expected_hit_rate(placement, uniform_profile(32, 8)) == 0.21875
    hand_rate = 1000 / _hand_decode_ms(placement, DEFAULT_COST_MODEL, MIXTRAL)
    sim_rates = [r.decode_tokens_per_second for r in grid.reports[Policy.FIDDLER.value]]
    speedup = grid.speedup(Policy.FIDDLER, Policy.EXPERT_COPY)
    ok = 5 <= speedup <= 15 and hand_rate > 3 and min(sim_rates) > 3 and elapsed < 10
    verdict(6, "Fiddler/ExpertCopy speedup in [5, 15], decode > 3 tok/s", ok,
            f"speedup {speedup:.2f}x, decode hand {hand_rate:.2f} / sim min {min(sim_rates):.2f} tok/s, grid {elapsed:.1f}s")


def test_07_amortisation(mixtral_grid):
    _, grid, _ = mixtral_grid
    bad = []
    for policy, reps in grid.reports.items():
        for il in grid.input_lens:
            tps = [r.tokens_per_second for r in sorted((r for r in reps if r.input_len == il), key=lambda r: r.output_len)]
            if any(b < a for a, b in zip(tps, tps[1:])):
                bad.append((policy, il))
    verdict(7, "tokens/s non-decreasing in output length for every policy and input length", not bad, f"violations {bad}")


def test_08_output_invariance():
    rng = np.random.default_rng(8)
    w = init_weights(TOY, seed=8)
    x = rng.standard_normal((24, TOY.hidden_dim))
    ref, _ = model_forward(TOY, w, x, kind=PREFILL)
    x1 = x[:1]
    ref1, _ = model_forward(TOY, w, x1, kind=DECODE)
    pairs = [(l, e) for l in range(TOY.num_layers) for e in range(TOY.experts_per_layer)]
    policies = list(Policy)
    same = 0
    for i in range(10):
        cap = int(rng.integers(0, len(pairs) + 1))
        pl = Placement(frozenset(pairs[j] for j in rng.choice(len(pairs), size=cap, replace=False)), cap)
        pol = policies[i % len(policies)]
        same += np.array_equal(scheduled_forward(TOY, w, x, pl, DEFAULT_COST_MODEL, pol), ref) and np.array_equal(
            scheduled_forward(TOY, w, x1, pl, DEFAULT_COST_MODEL, pol), ref1
        )
    verdict(8, "forward outputs bit-identical across 10 placements/policies", same == 10, f"{same}/10 identical")


def test_09_sparsity():
    thresholds = [0.001, 0.01, 0.1, 1.0]
    # by hand: |v| < 0.001 -> {0.0005}; < 0.01 -> same; < 0.1 adds 0.05; < 1.0 adds 0.5
    example = sparsity_histogram([0.0005, 0.05, 0.5, 2.0], thresholds)
    from moe_orch.moe_core import post_silu_activations

    w = init_weights(TOY, seed=9)
    acts = post_silu_activations(TOY, w, np.random.default_rng(9).standard_normal((256, TOY.hidden_dim)))
    rows = [sparsity_histogram(a, thresholds) for a in acts]
    monotone = all(all(b >= a for a, b in zip(r, r[1:])) for r in rows)
    verdict(9, "sparsity rows non-decreasing; 4-value example matches hand count",
            monotone and example == [0.25, 0.25, 0.5, 0.75], f"example {example}")


def test_10_determinism(tmp_path):
    outs = []
    for d in ("a", "b"):
        cfg = cli.RunConfig(seed=7, out_dir=str(tmp_path / d), dump_plans=False)
        assert cli.cmd_run(cfg) == 0
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / d).iterdir())})
    same = outs[0] == outs[1] and "report.csv" in outs[0]
    verdict(10, "two cmd_run invocations produce byte-identical reports", same, f"{len(outs[0])} files compared")
