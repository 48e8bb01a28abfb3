"""Command-line front end: ``pevdn train | suite | accountant | verify``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import acceptance, dp
from .config import ALL_MODES, Mode, RunConfig, load_config, parse_mode
from .errors import ConfigError, PEVDNError
from .summary import format_final, summarize, write_summary
from .train import train, write_metrics

SEED_ENV = "PEVDN_SEED"


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(SEED_ENV, f"cannot parse {raw!r} as int") from None


def _print_row(row):
    keys = ("total_steps", "win_rate", "mean_return", "loss_mean", "epsilon_tilde", "delta_tilde")
    print("  ".join(f"{k}={row[k]:.6g}" if isinstance(row[k], float) else f"{k}={row[k]}" for k in keys))


def cmd_train(args) -> int:
    overrides = {}
    seed = _env_seed()
    if seed is not None:
        overrides["seed"] = seed
    cfg = load_config(args.config, overrides)
    result = train(cfg)
    out = Path(args.metrics) if args.metrics else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_metrics(result.metrics, out)
        print(f"metrics written to {out}")
    if result.final:
        _print_row(result.final)
    else:
        print("empty step budget: no updates, no metrics")
    return 0


def suite_config(mode: Mode, seed: int, args) -> RunConfig:
    base = load_config(args.config) if args.config else RunConfig()
    overrides = {"mode": mode, "seed": seed, "env": args.env, "max_steps": args.max_steps,
                 "eval_interval": args.eval_interval}
    if mode == Mode.PEVDN_C and not args.config:
        overrides.update(acceptance.DP_OVERRIDES)
    return base.replace(**overrides).validate()


def cmd_suite(args) -> int:
    if args.seeds < 3:
        raise ConfigError("seeds", "the suite needs at least 3 seeds")
    base_seed = _env_seed() or 0
    seeds = [base_seed + i for i in range(args.seeds)]
    modes = [parse_mode(m) for m in args.modes.split(",")] if args.modes else list(ALL_MODES)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for mode in modes:
        for seed in seeds:
            result = train(suite_config(mode, seed, args))
            path = out / f"{mode.value}_seed{seed}.csv"
            write_metrics(result.metrics, path)
            paths.append(path)
            final = result.final or {}
            print(f"{mode.value:<12} seed {seed}: win_rate {final.get('win_rate', float('nan')):.3f} "
                  f"return {final.get('mean_return', float('nan')):.3f}", flush=True)
    summary = summarize(paths, required_modes=modes)
    write_summary(summary, out / "summary.csv")
    table = format_final(summary)
    lines = [table]
    if Mode.PEVDN_C.value in summary.final and Mode.VANILLA_VDN.value in summary.final:
        ratio = summary.ratio(Mode.PEVDN_C.value, Mode.VANILLA_VDN.value, "win_rate")
        lines.append(f"PE-VDN C / Vanilla VDN final win rate: {ratio:.3f} (reference target 0.8)")
    if Mode.IQL.value in summary.final:
        iql = summary.final[Mode.IQL.value]["mean_return_mean"]
        family = [m for m in (Mode.VANILLA_VDN, Mode.PEVDN_A, Mode.PEVDN_B) if m.value in summary.final]
        for m in family:
            ret = summary.final[m.value]["mean_return_mean"]
            lines.append(f"{m.value} final return {ret:.3f} {'>' if ret > iql else '<='} IQL {iql:.3f}")
    report = "\n".join(lines)
    (out / "final.txt").write_text(report + "\n", encoding="utf-8")
    if not args.no_plots:
        from .plotting import plot_curves

        for metric in ("win_rate", "mean_return"):
            plot_curves(summary, out / f"{metric}.png", metric, title=f"{args.env}: {metric.replace('_', ' ')}")
    print(report)
    return 0


def cmd_accountant(args) -> int:
    if args.throughput < 1:
        raise ConfigError("throughput", "buffer_throughput must be at least 1")
    if not 0 < args.delta < 1:
        raise ConfigError("delta", "delta must lie in (0, 1)")
    if args.epsilon is None:
        if args.q is None or args.sigma is None:
            raise ConfigError("q", "give --q and --sigma, or --epsilon directly")
        if not 0 < args.q <= 1:
            raise ConfigError("q", "sample rate must lie in (0, 1]")
        eps = dp.epsilon_for(args.buffer_size, args.q, args.sigma, args.delta)
        if args.verbose:
            print(f"epsilon({args.buffer_size}) = {eps:.6g}")
    else:
        eps = args.epsilon
    print(f"({eps / args.throughput:g}, {args.delta / args.throughput:g})")
    return 0


def cmd_verify(args) -> int:
    keys = [k.strip().upper() for k in args.only.split(",")] if args.only else list(acceptance.CRITERIA)
    unknown = [k for k in keys if k not in acceptance.CRITERIA]
    if unknown:
        raise ConfigError("only", f"unknown criteria {', '.join(unknown)}")
    results = acceptance.run_all(keys, echo=lambda line: print(line, flush=True))
    failed = [r.key for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print("all criteria passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pevdn", description="Decentralized VDN training with secure aggregation and DP")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="single run from a config file")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--metrics", help="write the metrics CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("suite", help="five-mode comparison across seeds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--env", default="climbing", choices=("climbing", "gridworld"))
    p.add_argument("--max-steps", type=int, default=acceptance.TOY_STEPS)
    p.add_argument("--eval-interval", type=int, default=acceptance.TOY_EVAL)
    p.add_argument("--modes", help="comma-separated subset of modes")
    p.add_argument("--config", help="base config applied to every cell")
    p.add_argument("--no-plots", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("accountant", help="what-if privacy ledger queries")
    p.add_argument("--q", type=float, help="Poisson sample rate")
    p.add_argument("--sigma", type=float, help="noise multiplier")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--buffer-size", type=int, default=500)
    p.add_argument("--throughput", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, help="use this eps(buffer_size) instead of the accountant")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("verify", help="run the acceptance battery")
    p.add_argument("--only", help="comma-separated criteria, e.g. AC-1,AC-3")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: bad config key '{exc.key}': {exc}", file=sys.stderr)
        return 2
    except (PEVDNError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
