"""Fiddler vs weight-copy offload over the 24-config grid, Mixtral geometry.

Uses uniform 56/256 and 52/256 placements plus a profiled (skewed) one and
prints average throughput, speedups and the steady-state decode rate.

    python3 scripts/reproduce_speedup.py [--workers 4] [--csv out.csv]
"""

import argparse
import time

from moe_orch.cost_model import DEFAULT_COST_MODEL
from moe_orch.moe_core import MIXTRAL, synth_trace
from moe_orch.placement import expected_hit_rate, greedy_place, profile_from_trace, uniform_profile
from moe_orch.simulator import Policy, run_grid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--skew", type=float, default=0.15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="write the 56/256 uniform grid report here")
    args = ap.parse_args()

    uniform = uniform_profile(MIXTRAL.num_layers, MIXTRAL.experts_per_layer)
    profiled = profile_from_trace(synth_trace(MIXTRAL, args.skew, 128, 512, seed=args.seed + 1), MIXTRAL)
    cases = [
        ("uniform 56/256", greedy_place(uniform, 56), uniform, 0.0),
        ("uniform 52/256", greedy_place(uniform, 52), uniform, 0.0),
        (f"profiled 56/256 (skew {args.skew})", greedy_place(profiled, 56), profiled, args.skew),
    ]
    for label, placement, profile, skew in cases:
        t0 = time.perf_counter()
        grid = run_grid(MIXTRAL, placement, DEFAULT_COST_MODEL, list(Policy), seed=args.seed, skew=skew, workers=args.workers)
        dt = time.perf_counter() - t0
        decode = min(r.decode_tokens_per_second for r in grid.reports["fiddler"])
        print(f"== {label}: hit rate {expected_hit_rate(placement, profile):.4f}, grid {dt:.1f}s")
        for p in grid.policies:
            print(f"  {p:>11}: {grid.average_tps(p):.3f} tok/s")
        print(f"  fiddler/expertcopy {grid.speedup('fiddler', 'expertcopy'):.2f}x, "
              f"fiddler/fullstream {grid.speedup('fiddler', 'fullstream'):.2f}x, "
              f"min fiddler decode {decode:.2f} tok/s")
        if args.csv and label.startswith("uniform 56"):
            with open(args.csv, "w") as fh:
                fh.write(grid.to_csv())


if __name__ == "__main__":
    main()
