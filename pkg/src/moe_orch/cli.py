"""Command-line entry point: calibrate, profile, place, plan, simulate, run, sparsity.

Exit codes: 0 success, 1 usage/config error, 2 data/validation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cost_model as cm
from .errors import ConfigError, DataError
from .moe_core import PRESETS, ModelShape, init_weights, load_trace, post_silu_activations, save_trace, synth_trace
from .placement import (
    greedy_place,
    hit_rate_bounds,
    expected_hit_rate,
    load_placement,
    load_profile_csv,
    popularity_summary,
    profile_from_trace,
    save_placement,
    sparsity_histogram,
    write_profile_csv,
    write_sparsity_csv,
)
from .scheduler import CALIBRATED, PAPER_FAITHFUL
from .simulator import INPUT_LENS, OUTPUT_LENS, Policy, parse_policies, plan_trace, run_grid, simulate_generation

SEED_ENV = "MOE_ORCH_SEED"
DEFAULT_THRESHOLDS = (0.001, 0.01, 0.1, 1.0)
REPORT_HEADER = ["policy", "input_len", "output_len", "prefill_ms", "decode_ms", "tokens_per_second"]


@dataclass
class RunConfig:
    preset: str = "mixtral"
    num_layers: int | None = None
    experts_per_layer: int | None = None
    top_k: int | None = None
    hidden_dim: int | None = None
    ffn_dim: int | None = None
    capacity: int = 56
    per_layer: bool = False
    cost: str | None = None  # path to cost-model JSON; shipped defaults when unset
    seed: int = 0
    model_seed: int = 0
    skew: float = 0.15
    calib_input_len: int = 128
    calib_output_len: int = 512
    input_lens: list = field(default_factory=lambda: list(INPUT_LENS))
    output_lens: list = field(default_factory=lambda: list(OUTPUT_LENS))
    policies: list = field(default_factory=lambda: [p.value for p in Policy])
    mode: str = CALIBRATED
    workers: int = 1
    out_dir: str = "results"
    dump_plans: bool = False

    def shape(self) -> ModelShape:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        overrides = {
            k: getattr(self, k)
            for k in ("num_layers", "experts_per_layer", "top_k", "hidden_dim", "ffn_dim")
            if getattr(self, k) is not None
        }
        try:
            return dataclasses.replace(PRESETS[self.preset], **overrides)
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> ModelShape:
        shape = self.shape()
        if not 0 <= self.capacity <= shape.total_experts:
            raise ConfigError(f"capacity {self.capacity} outside [0, {shape.total_experts}] experts")
        if not self.input_lens or not self.output_lens:
            raise ConfigError("grid lists must be non-empty")
        if any(n < 1 for n in self.input_lens) or any(n < 1 for n in self.output_lens):
            raise ConfigError("grid lengths must be positive")
        if not self.policies:
            raise ConfigError("policy list must be non-empty")
        try:
            [Policy(p) for p in self.policies]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.mode not in (CALIBRATED, PAPER_FAITHFUL):
            raise ConfigError(f"unknown mode {self.mode!r}")
        return shape


def load_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if p.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flag > config file > MOE_ORCH_SEED (seed only) > built-in default."""
    values: dict = {}
    if os.environ.get(SEED_ENV):
        try:
            values["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and v is not False:
            values[f.name] = v
    if isinstance(values.get("policies"), str):
        values["policies"] = [p.strip() for p in values["policies"].split(",") if p.strip()]
    return RunConfig(**values)


def _shape_from_args(args) -> ModelShape:
    return RunConfig(
        preset=args.preset,
        num_layers=args.num_layers,
        experts_per_layer=args.experts_per_layer,
        top_k=args.top_k,
        hidden_dim=args.hidden_dim,
        ffn_dim=args.ffn_dim,
    ).shape()


def _cost_from(path) -> cm.CostModel:
    return cm.load_cost_model(path) if path else cm.DEFAULT_COST_MODEL


def calibration_seed(seed: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(1,)).generate_state(1)[0])


def _report_rows(reports) -> list[list]:
    return [
        [r.policy, r.input_len, r.output_len, repr(r.prefill_ms), repr(r.decode_ms), repr(r.tokens_per_second)]
        for r in reports
    ]


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(_report_rows(reports))


def load_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(
            {
                "policy": r["policy"],
                "input_len": int(r["input_len"]),
                "output_len": int(r["output_len"]),
                "prefill_ms": float(r["prefill_ms"]),
                "decode_ms": float(r["decode_ms"]),
                "tokens_per_second": float(r["tokens_per_second"]),
            }
        )
    return out


def _write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------


def cmd_calibrate(args) -> int:
    records = cm.load_records_csv(args.records)
    model = cm.fit(records, nonexpert_ms_per_step=args.nonexpert_ms)
    cm.save_cost_model(model, args.out)
    verdict = cm.decode_assumption_check(model)
    print(f"wrote {args.out}")
    print(f"decode assumption (slow device beats weight copy at batch 1): {'holds' if verdict else 'VIOLATED'}")
    return 0


def cmd_synth_trace(args) -> int:
    shape = _shape_from_args(args)
    trace = synth_trace(shape, args.skew, args.input_len, args.output_len, args.seed, model_seed=args.model_seed)
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} steps to {args.out}")
    return 0


def cmd_profile(args) -> int:
    shape = _shape_from_args(args)
    if args.trace:
        trace = load_trace(args.trace, shape)
    else:
        seed = calibration_seed(args.seed)
        trace = synth_trace(shape, args.skew, args.input_len, args.output_len, seed, model_seed=args.model_seed)
    profile = profile_from_trace(trace, shape)
    write_profile_csv(profile, args.out)
    print(json.dumps(popularity_summary(profile), indent=2))
    return 0


def cmd_place(args) -> int:
    profile = load_profile_csv(args.profile)
    if args.capacity > profile.counts.size:
        raise ConfigError(f"capacity {args.capacity} exceeds {profile.counts.size} experts")
    placement = greedy_place(profile, args.capacity, per_layer=args.per_layer)
    save_placement(placement, args.out)
    best, worst, rnd = hit_rate_bounds(profile, args.capacity)
    print(f"hit rate {expected_hit_rate(placement, profile):.4f} (best {best:.4f}, random {rnd:.4f}, worst {worst:.4f})")
    return 0


def cmd_plan(args) -> int:
    shape = _shape_from_args(args)
    trace = load_trace(args.trace, shape)
    placement = load_placement(args.placement)
    placement.check_shape(shape)
    plans = plan_trace(trace, shape, placement, _cost_from(args.cost), args.mode)
    _write_jsonl(plans, args.out)
    print(f"wrote plans for {len(plans)} steps to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    shape = _shape_from_args(args)
    trace = load_trace(args.trace, shape)
    placement = load_placement(args.placement)
    placement.check_shape(shape)
    cost = _cost_from(args.cost)
    reports = [simulate_generation(trace, shape, placement, cost, p, args.mode) for p in parse_policies(args.policies)]
    write_report_csv(reports, args.out)
    for r in reports:
        print(f"{r.policy:>11}: {r.tokens_per_second:.3f} tok/s (prefill {r.prefill_ms:.1f} ms, decode {r.decode_ms:.1f} ms)")
    return 0


def cmd_run(config: RunConfig) -> int:
    shape = config.validate()
    cost = _cost_from(config.cost)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    calib = synth_trace(
        shape, config.skew, config.calib_input_len, config.calib_output_len,
        calibration_seed(config.seed), model_seed=config.model_seed,
    )
    profile = profile_from_trace(calib, shape)
    placement = greedy_place(profile, config.capacity, per_layer=config.per_layer)
    if not cm.decode_assumption_check(cost):
        print("warning: decode assumption violated by this cost model", file=sys.stderr)

    grid = run_grid(
        shape, placement, cost, [Policy(p) for p in config.policies], seed=config.seed,
        input_lens=config.input_lens, output_lens=config.output_lens, skew=config.skew,
        model_seed=config.model_seed, workers=config.workers, mode=config.mode,
    )
    write_report_csv([r for reps in grid.reports.values() for r in reps], out / "report.csv")
    summary = grid.summary_dict()
    best, worst, rnd = hit_rate_bounds(profile, config.capacity)
    summary["placement"] = {"capacity": config.capacity, "hit_rate_best": best, "hit_rate_worst": worst, "hit_rate_random": rnd}
    summary["decode_assumption_holds"] = cm.decode_assumption_check(cost)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cm.save_cost_model(cost, out / "cost_model.json")
    write_profile_csv(profile, out / "profile.csv")
    save_placement(placement, out / "placement.json")

    if config.dump_plans:
        from .simulator import config_seed

        plans = []
        for il in config.input_lens:
            for ol in config.output_lens:
                trace = synth_trace(shape, config.skew, il, ol, config_seed(config.seed, il), model_seed=config.model_seed)
                plans.extend(
                    {"input_len": il, "output_len": ol, **rec}
                    for rec in plan_trace(trace, shape, placement, cost, config.mode)
                )
        _write_jsonl(plans, out / "plans.jsonl")

    for p in grid.policies:
        print(f"{p:>11}: {grid.average_tps(p):.3f} tok/s average over {len(grid.reports[p])} configs")
    for key, v in summary["speedups"].items():
        print(f"speedup {key}: {v:.2f}x")
    print(f"wrote {out / 'report.csv'} and {out / 'summary.json'}")
    return 0


def _run_entry(args) -> int:
    return cmd_run(resolve_config(args))


def cmd_sparsity(args) -> int:
    thresholds = args.thresholds
    if args.activations:
        with np.load(args.activations) as data:
            keys = sorted(data.files, key=lambda k: int(k.rsplit("_", 1)[-1]) if k.rsplit("_", 1)[-1].isdigit() else k)
            per_layer = [data[k].ravel() for k in keys]
    else:
        shape = _shape_from_args(args)
        if args.num_tokens < 1:
            raise DataError("empty corpus: need at least one token")
        weights = init_weights(shape, seed=args.seed, zero=args.zero_init)
        tokens = np.random.default_rng(args.seed + 1).standard_normal((args.num_tokens, shape.hidden_dim))
        per_layer = post_silu_activations(shape, weights, tokens)
    if not per_layer or any(a.size == 0 for a in per_layer):
        raise DataError("empty corpus: no activations")
    hist = [sparsity_histogram(a, thresholds) for a in per_layer]
    write_sparsity_csv(hist, thresholds, args.out)
    print(f"wrote {len(hist)} layers to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_shape(p, default_preset="mixtral"):
    p.add_argument("--preset", default=default_preset, choices=sorted(PRESETS))
    for name in ("num-layers", "experts-per-layer", "top-k", "hidden-dim", "ffn-dim"):
        p.add_argument(f"--{name}", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moe-orch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="fit a cost model from microbenchmark CSV")
    p.add_argument("records")
    p.add_argument("--out", "-o", default="cost_model.json")
    p.add_argument("--nonexpert-ms", type=float, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth-trace", help="write a synthetic routing trace (JSON Lines)")
    _add_shape(p)
    p.add_argument("--input-len", type=int, default=64)
    p.add_argument("--output-len", type=int, default=64)
    p.add_argument("--skew", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--out", "-o", default="trace.jsonl")
    p.set_defaults(func=cmd_synth_trace)

    p = sub.add_parser("profile", help="count tokens routed to each expert")
    _add_shape(p)
    p.add_argument("--trace", help="trace JSONL; a synthetic calibration trace is generated when omitted")
    p.add_argument("--input-len", type=int, default=128)
    p.add_argument("--output-len", type=int, default=512)
    p.add_argument("--skew", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--out", "-o", default="profile.csv")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("place", help="greedy popularity placement under a capacity")
    p.add_argument("--profile", required=True)
    p.add_argument("--capacity", type=int, required=True)
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--out", "-o", default="placement.json")
    p.set_defaults(func=cmd_place)

    for name, func, help_ in (
        ("plan", cmd_plan, "dump per-layer device plans for a trace"),
        ("simulate", cmd_simulate, "replay a trace under one or more policies"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_shape(p)
        p.add_argument("--trace", required=True)
        p.add_argument("--placement", required=True)
        p.add_argument("--cost", default=None)
        p.add_argument("--mode", default=CALIBRATED, choices=[CALIBRATED, PAPER_FAITHFUL])
        if name == "simulate":
            p.add_argument("--policies", default=",".join(x.value for x in Policy))
        p.add_argument("--out", "-o", default="plans.jsonl" if name == "plan" else "report.csv")
        p.set_defaults(func=func)

    p = sub.add_parser("run", help="end-to-end: profile, place, simulate the grid, write reports")
    p.add_argument("--config", help="TOML or JSON file with RunConfig keys")
    p.add_argument("--preset", choices=sorted(PRESETS))
    for name in ("num-layers", "experts-per-layer", "top-k", "hidden-dim", "ffn-dim", "capacity", "seed", "model-seed", "workers"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--per-layer", action="store_true", default=None)
    p.add_argument("--cost")
    p.add_argument("--skew", type=float)
    p.add_argument("--input-lens", type=_int_list)
    p.add_argument("--output-lens", type=_int_list)
    p.add_argument("--policies")
    p.add_argument("--mode", choices=[CALIBRATED, PAPER_FAITHFUL])
    p.add_argument("--out-dir")
    p.add_argument("--dump-plans", action="store_true", default=None)
    p.set_defaults(func=_run_entry)

    p = sub.add_parser("sparsity", help="post-SiLU magnitude histogram per layer")
    _add_shape(p, default_preset="toy")
    p.add_argument("--activations", help=".npz of per-layer arrays (layer_0, layer_1, ...)")
    p.add_argument("--num-tokens", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-init", action="store_true")
    p.add_argument("--thresholds", type=_float_list, default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--out", "-o", default="sparsity.csv")
    p.set_defaults(func=cmd_sparsity)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
