"""Post-SiLU magnitude histogram of the toy model, printed in table layout.

SiLU almost never emits exact zeros, so the smallest bins stay small for a
random model; a zero-initialised model lands entirely in the first bin.
"""

import argparse

import numpy as np

from moe_orch.moe_core import TOY, init_weights, post_silu_activations
from moe_orch.placement import sparsity_histogram, threshold_label

THRESHOLDS = [0.001, 0.01, 0.1, 1.0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tokens", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--zero-init", action="store_true")
    args = ap.parse_args()

    w = init_weights(TOY, seed=args.seed, zero=args.zero_init)
    x = np.random.default_rng(args.seed + 1).standard_normal((args.tokens, TOY.hidden_dim))
    print("layer " + " ".join(f"{threshold_label(t):>9}" for t in THRESHOLDS))
    for l, acts in enumerate(post_silu_activations(TOY, w, x)):
        row = sparsity_histogram(acts, THRESHOLDS)
        print(f"{l:<5} " + " ".join(f"{100 * v:>8.2f}%" for v in row))


if __name__ == "__main__":
    main()
