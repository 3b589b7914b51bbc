#!/usr/bin/env python
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from numeric_facet_partition.bounds import check_property1, check_theorem1, check_theorem2, check_theorem3
from numeric_facet_partition.errors import ConfigError, FacetPartitionError
from numeric_facet_partition.experiment import SEED_ENV_VAR, cmd_compare, cmd_run, load_experiment_config
from numeric_facet_partition.log_model import parse_log, serialize_log, split_by_time
from numeric_facet_partition.ratio_opt import cache_cdf, cdf_curve, surrogate_curve
from numeric_facet_partition.synthetic import ValueCdfSpec, generate_synthetic, load_synth_config

logger = logging.getLogger(__name__)

RULER = "=" * 60


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with code 1 like every other user error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _env_seed() -> Optional[int]:
    value = os.getenv(SEED_ENV_VAR)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {value!r}")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = _env_seed()
    return env if env is not None else 0


def cmd_gen(args) -> None:
    config = load_synth_config(args.config, n_queries=args.n_queries, seed=args.seed if args.seed is not None else _env_seed())
    log = generate_synthetic(config)
    serialize_log(log, args.out)
    print(f"Wrote {len(log)} impressions to {args.out} (m={log.stats.m:.1f})")


def cmd_split(args) -> None:
    log = parse_log(args.log)
    train, test = split_by_time(log, args.train_fraction)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    serialize_log(train, out / "train.jsonl")
    serialize_log(test, out / "test.jsonl")
    print(f"Split {len(log)} impressions: {len(train)} train / {len(test)} test -> {out}")


def _run_overrides(args) -> dict:
    return {
        "method": args.method,
        "k": args.k,
        "seed": args.seed,
        "train_path": args.train,
        "test_path": args.test,
        "model_in": args.model_in,
        "model_out": args.model_out,
        "report_out": args.report_out,
        "rounding_precision": args.precision,
        "grid_objective": args.grid_objective,
        "prune": False if args.no_prune else None,
        "click": {"kind": args.click_kind, "lam": args.lam},
        "optimizer": {"method": args.opt_method, "restarts": args.restarts},
        "tree": {"criterion": args.criterion, "min_leaf": args.min_leaf},
        "features": {"quartiles": True if args.quartiles else None},
    }


def _print_report(result) -> None:
    summary = result.report.summary()
    print(RULER)
    print(f"📊 {summary['method']} (k={summary['k']})")
    print(RULER)
    print(f"ARR: {summary['arr']:.4f} over {summary['n']} test impressions")
    for key in sorted(k for k in summary if k not in ("method", "k", "arr", "n")):
        print(f"  {key}: {summary[key]}")
    for path in result.written:
        print(f"  wrote {path}")


def cmd_run_cli(args) -> None:
    config = load_experiment_config(args.config, **_run_overrides(args))
    _print_report(cmd_run(config))


def cmd_compare_cli(args) -> None:
    shared = {"k": None, "seed": args.seed, "train_path": args.train, "test_path": args.test}
    configs = []
    for path in args.config or []:
        configs.append(load_experiment_config(path, **shared))
    for method in args.methods.split(",") if args.methods else []:
        for k in args.k:
            configs.append(load_experiment_config(None, **{**shared, "method": method.strip(), "k": k}))

    comparison = cmd_compare(configs, paired_ttest_flag=not args.no_ttest, out_dir=args.out_dir)
    print(RULER)
    print("📊 ARR BY METHOD")
    print(RULER)
    print(comparison.arr_table.to_string(index=False))
    if not comparison.pairs.empty:
        print("\n🔍 Paired t-tests")
        print(comparison.pairs.to_string(index=False))
    if args.out_dir:
        print(f"\nWrote tables to {args.out_dir}")


def cmd_bounds(args) -> None:
    cdf = ValueCdfSpec(kind=args.cdf)
    seed = _seed(args)
    if args.theorem == "property1":
        result = check_property1(n_pairs=args.trials, seed=seed)
        print(f"Property 1: {result.violations} violations in {result.n_pairs} pairs "
              f"{'✅' if result.passed else '❌'}")
        return
    if args.theorem == "2":
        report = check_theorem2(cdf, args.k, args.grid)
        if not report.applicable:
            print(f"⚠️  Theorem 2 not applicable: {args.cdf} CDF is not concave on the grid")
        else:
            print(f"Theorem 2: widths {['%.4f' % w for w in report.widths]} "
                  f"{'✅ monotone' if report.passed else '❌ not monotone'}")
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                json.dump(report.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
        return

    if args.theorem == "1":
        report = check_theorem1(cdf, args.n, args.k, args.epsilon, args.trials, seed, args.grid)
    else:
        report = check_theorem3(cdf, args.n, args.epsilon, args.trials, args.radius, seed, args.k, args.grid)
    print(RULER)
    print(f"📊 {report.theorem}: n={report.n} k={report.k} eps={report.epsilon} trials={report.trials}")
    print(RULER)
    print(f"Observed exceedance: {report.observed_exceedance_rate:.4f}")
    print(f"Theoretical bound:   {report.theoretical_bound:.4g} (+{report.mc_slack:.4g} MC slack)")
    print(f"Inequality violations: {report.inequality_violations}")
    if not report.applicable:
        print("⚠️  Preconditions do not hold for this configuration")
    print("✅ PASS" if report.passed else "❌ FAIL")
    if args.out:
        report.write(args.out)
    if args.csv:
        report.to_csv(args.csv)


def cmd_cdf_curve(args) -> None:
    cdf = cache_cdf(parse_log(args.log))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cdf_curve(cdf).to_csv(out / "cdf_curve.csv", index=False)
    surrogate_curve(cdf).to_csv(out / "surrogate_curve.csv", index=False)
    print(f"Wrote curves for n={cdf.n}, n0={cdf.n0} to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="facet_partition", description="Numeric facet range partitioning")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    gen = sub.add_parser("gen", help="Generate a synthetic log")
    gen.add_argument("--config", type=str, help="Generator YAML (packaged defaults otherwise)")
    gen.add_argument("--n-queries", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", type=str, required=True)
    gen.set_defaults(func=cmd_gen)

    split = sub.add_parser("split", help="Split a log by timestamp")
    split.add_argument("--log", type=str, required=True)
    split.add_argument("--train-fraction", type=float, default=0.7)
    split.add_argument("--out-dir", type=str, required=True)
    split.set_defaults(func=cmd_split)

    run = sub.add_parser("run", help="Train and evaluate one method")
    run.add_argument("--config", type=str, help="Experiment YAML")
    run.add_argument("--method", choices=["quantile", "dp", "ratio", "tree", "grid"])
    run.add_argument("--k", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--train", type=str)
    run.add_argument("--test", type=str)
    run.add_argument("--model-in", type=str)
    run.add_argument("--model-out", type=str)
    run.add_argument("--report-out", type=str)
    run.add_argument("--precision", type=float, help="Round separators to this precision")
    run.add_argument("--grid-objective", choices=["surrogate", "true_arr"])
    run.add_argument("--click-kind", choices=["mixture", "rank_based"])
    run.add_argument("--lam", type=float)
    run.add_argument("--opt-method", choices=["powell", "nelder_mead", "cg", "bfgs", "slsqp"])
    run.add_argument("--restarts", type=int)
    run.add_argument("--criterion", choices=["min_cn", "mse"])
    run.add_argument("--min-leaf", type=int)
    run.add_argument("--quartiles", action="store_true", help="Add quartile features for the tree")
    run.add_argument("--no-prune", action="store_true")
    run.set_defaults(func=cmd_run_cli)

    compare = sub.add_parser("compare", help="Compare methods on one test split")
    compare.add_argument("--config", type=str, action="append", help="Experiment YAML (repeatable)")
    compare.add_argument("--methods", type=str, help="Comma-separated methods using default settings")
    compare.add_argument("--k", type=int, nargs="+", default=[3])
    compare.add_argument("--seed", type=int)
    compare.add_argument("--train", type=str)
    compare.add_argument("--test", type=str, required=True)
    compare.add_argument("--out-dir", type=str)
    compare.add_argument("--no-ttest", action="store_true")
    compare.set_defaults(func=cmd_compare_cli)

    bounds = sub.add_parser("bounds", help="Monte-Carlo check of the concentration bounds")
    bounds.add_argument("--theorem", choices=["1", "2", "3", "property1"], default="1")
    bounds.add_argument("--cdf", choices=["linear", "concave", "convex"], default="concave")
    bounds.add_argument("--n", type=int, default=1000)
    bounds.add_argument("--k", type=int, default=2)
    bounds.add_argument("--epsilon", type=float, default=0.1)
    bounds.add_argument("--trials", type=int, default=1000)
    bounds.add_argument("--radius", type=float, default=0.02)
    bounds.add_argument("--grid", type=int, default=200, help="Grid resolution per dimension")
    bounds.add_argument("--seed", type=int)
    bounds.add_argument("--out", type=str, help="JSON report")
    bounds.add_argument("--csv", type=str, help="Per-trial sup deviations")
    bounds.set_defaults(func=cmd_bounds)

    curve = sub.add_parser("cdf-curve", help="Write F_n(r) and C_n(r_1) curves of a log")
    curve.add_argument("--log", type=str, required=True)
    curve.add_argument("--out-dir", type=str, required=True)
    curve.set_defaults(func=cmd_cdf_curve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on user error, 2 on internal error."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s - %(message)s",
    )
    try:
        args.func(args)
    except (FacetPartitionError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.debug("Internal error", exc_info=True)
        print(f"Internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def run():
    """Run the facet_partition command line."""
    sys.exit(main())


def run_experiment():
    """Shortcut for `facet_partition run ...`."""
    sys.exit(main(["run"] + sys.argv[1:]))


def verify_bounds():
    """Shortcut for `facet_partition bounds ...`."""
    sys.exit(main(["bounds"] + sys.argv[1:]))


if __name__ == "__main__":
    run()
