"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad data, bad config, failed
gradient check), 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, neural
from .config import RunConfig, load_config, with_overrides
from .errors import TradingError, ValidationError
from .market_data import (
    PriceSeries,
    boundary_for_fraction,
    load_series,
    read_bars,
    split_series,
    synthetic_bars,
    volume_scale_of,
    write_bars,
)
from .plotting import curve_svg, metrics_svg

GRADCHECK_TOL = 1e-4


def _partitions(cfg: RunConfig) -> tuple[PriceSeries, PriceSeries]:
    series = load_series(cfg.data.path, cfg.data.format)
    boundary = cfg.data.split_boundary
    if boundary is None:
        boundary = boundary_for_fraction(series, cfg.data.test_fraction)
    # volume is scaled by the training partition only, so test rows never leak into it
    train_bars = [b for b in series.bars if b.timestamp < boundary]
    if train_bars:
        series = PriceSeries.from_bars(series.bars, series.source_id, volume_scale_of(train_bars))
    return split_series(series, boundary)


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    return Path(override or cfg.run.out_dir or "runs")


def cmd_validate_data(args) -> int:
    bars = read_bars(args.csv)
    print(f"ok: {len(bars)} bars")
    return 0


def cmd_synth_data(args) -> int:
    bars = synthetic_bars(args.bars, period=args.period, amplitude=args.amplitude, noise=args.noise, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        write_bars(bars, f)
    print(f"wrote {len(bars)} bars to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, "run", seed=args.seed, total_steps=args.total_steps, out_dir=args.out_dir)
    out = _out_dir(cfg, None)
    train_part, test_part = _partitions(cfg)
    run = with_overrides(cfg, "run", out_dir=str(out)).run
    result = harness.train(train_part, cfg.env, cfg.agent, cfg.net, run.total_steps, run.seed,
                           run=run, eval_series=test_part)
    cfg.save(out / "config.json")
    print(f"trained {run.total_steps} steps, {len(result.metrics)} episodes; checkpoint: {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _, test_part = _partitions(cfg)
    ckpt = neural.Checkpoint.load(args.checkpoint)
    rep = harness.evaluate(ckpt, test_part, cfg.env, args.scenario,
                           baseline_episodes=cfg.run.baseline_episodes, baseline_seed=cfg.run.seed)
    out = _out_dir(cfg, args.out_dir)
    rep.save(out / f"eval_{args.scenario}.json")
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def cmd_baseline(args) -> int:
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, "run", seed=args.seed, baseline_episodes=args.episodes)
    _, test_part = _partitions(cfg)
    env_cfg = harness.eval_env_config(cfg.env, test_part, args.scenario)
    summary = harness.random_baseline(test_part, env_cfg, cfg.run.seed, max(cfg.run.baseline_episodes, 1))
    doc = {"format_version": harness.FORMAT_VERSION, "scenario": args.scenario, "mean_return_pct": summary.mean,
           "std_return_pct": summary.std, "episodes": len(summary.returns)}
    out = _out_dir(cfg, args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"baseline_{args.scenario}.json").write_text(json.dumps(doc, indent=2))
    print(f"random baseline: {summary.mean:.4f} ± {summary.std:.4f} % over {len(summary.returns)} episodes")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, "run", seed=args.seed, out_dir=args.out_dir)
    out = _out_dir(cfg, None)
    run = with_overrides(cfg, "run", out_dir=str(out)).run
    train_part, test_part = _partitions(cfg)
    result = harness.sweep(train_part, test_part, cfg.env, cfg.agent, cfg.net, run,
                           cfg.sweep.archs, cfg.sweep.batch_sizes, cfg.sweep.scenarios, jobs=args.jobs)
    cfg.save(out / "config.json")
    print(f"{'arch':<6} {'batch':>5} {'no_comm %':>12} {'with_comm %':>12}")
    for row in result.summary:
        nc, wc = row["return_no_commission_pct"], row["return_with_commission_pct"]
        print(f"{row['arch']:<6} {row['batch_size']:>5} {'' if nc is None else f'{nc:12.3f}':>12} "
              f"{'' if wc is None else f'{wc:12.3f}':>12}")
    return 0


def cmd_gradcheck(args) -> int:
    net, x = neural.random_gradcheck_case(args.arch, args.seed)
    err = neural.gradcheck(net, x, h=args.h)
    print(f"{err:.3e}")
    return 0 if err < GRADCHECK_TOL else 1


def cmd_plot(args) -> int:
    columns, rows = harness.read_versioned_csv(args.metrics)
    if "episode_index" in columns:
        svg = metrics_svg(rows)
    elif "step" in columns:
        svg = curve_svg(rows)
    else:
        raise ValidationError(f"{args.metrics}: neither a metrics nor a curve CSV")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddqn-trading", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-data", help="parse a bar CSV and report problems")
    s.add_argument("csv")
    s.set_defaults(func=cmd_validate_data)

    s = sub.add_parser("synth-data", help="write a synthetic sine-wave bar CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--bars", type=int, default=50_000)
    s.add_argument("--period", type=int, default=20)
    s.add_argument("--amplitude", type=float, default=0.01)
    s.add_argument("--noise", type=float, default=0.001)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train one agent")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--total-steps", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="greedy evaluation of a checkpoint on the test partition")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--scenario", choices=harness.SCENARIOS, default="with_commission")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="uniform-random policy on the test partition")
    s.add_argument("--config", required=True)
    s.add_argument("--scenario", choices=harness.SCENARIOS, default="with_commission")
    s.add_argument("--episodes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("sweep", help="train and evaluate the arch x batch x scenario grid")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of backprop")
    s.add_argument("--arch", choices=("ffdqn", "cnn"), default="ffdqn")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("plot", help="render a metrics or curve CSV as SVG")
    s.add_argument("--metrics", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (TradingError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
