#!/usr/bin/env python3
from __future__ import annotations

import argparse
from pathlib import Path

from diffusion import schedule_to_json
from eval_metrics import linearity_score
from grid_model import make_grid_tensors
from pf_engine import load_dataset
from pipeline_utils import (
    configure_logging,
    env_override,
    resolve_config,
    run_stage,
    stream_rng,
    with_cli_overrides,
    write_csv,
    write_json,
    write_jsonl,
)
from schedule_learner import forward_imbalance_curve, resolve_gamma_terminal, train_schedule


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Learn a noise schedule whose forward imbalance grows linearly.")
    parser.add_argument("--dataset", required=True, help="Dataset directory written by gen_data.py.")
    parser.add_argument("--out", help="Output directory for schedule.json, forward-curve.csv and schedule-log.jsonl.")
    parser.add_argument("--seed", type=int, help="Global seed (default: seed from the config).")
    parser.add_argument("--epochs", type=int, help="Maximum epochs (default: schedule.epochs from the config).")
    parser.add_argument(
        "--gamma-terminal",
        type=float,
        help="Terminal imbalance bound in p.u. (default: schedule.gammaTerminal, measured when null).",
    )
    parser.add_argument(
        "--curve-samples",
        type=int,
        default=1000,
        help="Dataset samples used for the forward imbalance curves (default: 1000).",
    )
    parser.add_argument("--config", help="Pipeline config JSON (default: config/pipeline.json).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    args = parser.parse_args(argv)
    args.out = env_override("OUT", args.out)
    if not args.out:
        parser.error("--out (or PFDIFF_OUT) is required.")
    if args.epochs is not None and args.epochs < 1:
        parser.error("--epochs must be >= 1.")
    if args.curve_samples < 1:
        parser.error("--curve-samples must be >= 1.")
    return args


def _run(args: argparse.Namespace) -> int:
    config = with_cli_overrides(
        resolve_config(args.config),
        seed=args.seed,
        schedule={"epochs": args.epochs, "gamma_terminal": args.gamma_terminal},
    )
    out_dir = Path(args.out)
    dataset = load_dataset(Path(args.dataset))
    grid = make_grid_tensors(dataset.case, dataset.layout)
    gamma_terminal = resolve_gamma_terminal(config, grid, dataset.bounds)
    data = dataset.normalized()
    result = train_schedule(data, grid, dataset.bounds, config, gamma_terminal)

    subset = data[: args.curve_samples]
    draws = config.schedule.curve_draws
    baseline_curve = forward_imbalance_curve(
        subset, result.baseline, grid, dataset.bounds, draws, stream_rng(config.seed, "schedule", 1)
    )
    learned_curve = forward_imbalance_curve(
        subset, result.schedule, grid, dataset.bounds, draws, stream_rng(config.seed, "schedule", 2)
    )
    baseline_score = linearity_score(baseline_curve, result.bound)
    learned_score = linearity_score(learned_curve, result.bound)
    gammas = result.bound.values()

    payload = schedule_to_json(
        result.schedule,
        result.bound,
        baseline=result.baseline,
        extra={
            "case": dataset.case.name,
            "seed": config.seed,
            "gammaMeasured": config.schedule.gamma_terminal is None,
            "epochs": len(result.log),
            "linearity": {
                "baseline": {"rmse": baseline_score.rmse, "maxDeviation": baseline_score.max_deviation},
                "learned": {"rmse": learned_score.rmse, "maxDeviation": learned_score.max_deviation},
            },
        },
    )
    write_json(out_dir / "schedule.json", payload)
    write_csv(
        out_dir / "forward-curve.csv",
        ["t", "gamma", "baseline", "learned"],
        ([t, gammas[t], baseline_curve[t], learned_curve[t]] for t in range(result.bound.steps + 1)),
    )
    write_jsonl(out_dir / "schedule-log.jsonl", result.log)
    print(
        f"Wrote learned schedule with {result.schedule.steps} steps (gamma_T {gamma_terminal:.4f} p.u., "
        f"linearity RMSE {learned_score.rmse:.4f} vs baseline {baseline_score.rmse:.4f})."
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.verbose)
    return run_stage(lambda: _run(args))


if __name__ == "__main__":
    raise SystemExit(main())
