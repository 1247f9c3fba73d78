"""Popularity and hit-rate bounds for synthetic routing at several skews."""

import argparse

from moe_orch.moe_core import MIXTRAL, synth_trace
from moe_orch.placement import hit_rate_bounds, popularity_summary, profile_from_trace


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--capacity", type=int, default=56)
    ap.add_argument("--skews", default="0,0.15,0.5,1.0")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("skew   mean   std    below_0.6  above_0.8  best    random  worst")
    for skew in (float(s) for s in args.skews.split(",")):
        prof = profile_from_trace(synth_trace(MIXTRAL, skew, 128, 512, seed=args.seed), MIXTRAL)
        s = popularity_summary(prof)
        best, worst, rnd = hit_rate_bounds(prof, args.capacity)
        print(f"{skew:<6} {s['mean']:.3f}  {s['std']:.3f}  {s['below_0.6']:>9}  {s['above_0.8']:>9}  "
              f"{best:.4f}  {rnd:.4f}  {worst:.4f}")


if __name__ == "__main__":
    main()
