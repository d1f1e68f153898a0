"""Command-line entry points.

Exit codes: 0 success, 2 infeasible/invalid configuration, 3 check
failures in strict mode.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import harness
from .config import load_scenario
from .errors import ConfigurationError

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_CHECK_FAILURE = 3


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="scenario config file (default: built-in wing-rock)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None,
                        help="override the simulated step count")
    parser.add_argument("--variant", choices=("tube", "shallow", "deep"),
                        default=None)
    parser.add_argument("--out", type=Path, default=Path("runs"),
                        help="output directory")
    sync = parser.add_mutually_exclusive_group()
    sync.add_argument("--sync-training", dest="sync_training",
                      action="store_true", default=None,
                      help="train the hidden stack in-process (deterministic)")
    sync.add_argument("--async-training", dest="sync_training",
                      action="store_false",
                      help="train on a background worker thread")


def _load(args):
    cfg = load_scenario(args.config)
    return cfg.with_overrides(seed=args.seed, t_sim=args.steps,
                              variant=args.variant,
                              synchronous=args.sync_training)


def _cmd_run(args):
    config = _load(args)
    log = harness.run_scenario(config)
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)
    harness.export_csv(log, outdir / "trajectory.csv")
    log.trace.save(outdir / "trace.npz")
    harness.export_plot_data(log, outdir / "plot.dat")
    ctx = harness.setup_scenario(config)
    ctx.reference.save_csv(outdir / "reference.csv")
    for key, value in log.summary.items():
        print(f"{key}: {value}")
    print(f"outputs written to {outdir}")
    return EXIT_OK


def _cmd_compare(args):
    config = _load(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(range(args.num_seeds))
    result = harness.compare_controllers(config, seeds)
    print(result.to_text())
    args.out.mkdir(parents=True, exist_ok=True)
    result.save_csv(args.out / "comparison.csv")
    logs = [harness.run_scenario(config.with_overrides(
        seed=seeds[0], variant=v, log_value_decomposition=False))
        for v in ("tube", "shallow", "deep")]
    harness.export_plot_data(logs, args.out / "plot.dat")
    print(f"outputs written to {args.out}")
    return EXIT_OK


def _cmd_check(args):
    config = _load(args)
    trace = diag.TrajectoryTrace.load(args.trace)
    ctx = harness.setup_scenario(config)
    constants = harness.derive_scenario_constants(ctx, c3_samples=args.c3_samples)
    reports = harness.run_standard_checks(
        trace, constants, config.sets.u_max, ctx.reference.horizon,
        slack=args.slack)
    failures = 0
    for report in reports:
        print(report.to_line())
        if not report.vacuous and not report.passed:
            failures += 1
    print(f"{len(reports) - failures}/{len(reports)} checks passed")
    if failures and args.strict:
        return EXIT_CHECK_FAILURE
    return EXIT_OK


def _cmd_governor(args):
    config = _load(args)
    ctx = harness.setup_scenario(config)
    ref = ctx.reference
    print(f"reference horizon {ref.horizon}, max input {ref.max_input_norm():.6g}")
    cols = ([f"x{i}" for i in range(ref.state_dim)]
            + [f"u{i}" for i in range(ref.input_dim)])
    print("t " + " ".join(f"{c:>13s}" for c in cols))
    for t in range(ref.horizon + 1):
        u = ref.inputs[t] if t < ref.horizon else np.zeros(ref.input_dim)
        vals = np.concatenate([ref.states[t], u])
        print(f"{t:<3d}" + " ".join(f"{v:13.6e}" for v in vals))
    if args.csv is not None:
        ref.save_csv(args.csv)
        print(f"reference written to {args.csv}")
    return EXIT_OK


def _cmd_selftest(args):
    from . import selftest
    failures = selftest.run(quick=args.quick)
    return EXIT_CHECK_FAILURE if failures else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deepmpc",
        description="Tube MPC with an online-adapted network disturbance "
                    "rejector: simulation, comparison, and diagnostics.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one scenario and export logs")
    _add_common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="race tube/shallow/deep across seeds")
    _add_common(p_cmp)
    p_cmp.add_argument("--seeds", type=str, default=None,
                       help="comma-separated seed list")
    p_cmp.add_argument("--num-seeds", type=int, default=5,
                       help="use seeds 0..N-1 when --seeds is absent")
    p_cmp.set_defaults(func=_cmd_compare)

    p_chk = sub.add_parser("check", help="run diagnostics on a saved trace")
    _add_common(p_chk)
    p_chk.add_argument("--trace", type=Path, required=True,
                       help="trace.npz produced by `run`")
    p_chk.add_argument("--strict", action="store_true",
                       help="exit 3 when any check fails")
    p_chk.add_argument("--slack", type=float, default=1e-6)
    p_chk.add_argument("--c3-samples", type=int, default=2000)
    p_chk.set_defaults(func=_cmd_check)

    p_gov = sub.add_parser("governor", help="print the offline reference")
    _add_common(p_gov)
    p_gov.add_argument("--csv", type=Path, default=None,
                       help="also write the reference as CSV")
    p_gov.set_defaults(func=_cmd_governor)

    p_self = sub.add_parser("selftest", help="run the built-in oracle suites")
    p_self.add_argument("--quick", action="store_true",
                        help="smaller sample counts")
    p_self.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"infeasible configuration: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
