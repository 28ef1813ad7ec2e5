#!/usr/bin/env python3
from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from diffusion import ImbalanceBound, NoiseSchedule, schedule_from_json
from eval_metrics import ImbalanceSummary, mean_imbalance
from grid_model import GridTensors, make_grid_tensors
from pf_engine import PowerFlowDataset, load_dataset
from pipeline_utils import (
    VERSION,
    PipelineConfig,
    config_to_json,
    configure_logging,
    env_float,
    env_int,
    env_override,
    read_json,
    resolve_config,
    run_stage,
    utc_now_iso,
    with_cli_overrides,
    write_json,
)
from sample import Sampler, draw_samples
from schedule_learner import resolve_gamma_terminal, train_schedule
from train_ddpm import fit_denoiser, resolve_schedule

VARIANTS = ("no-physics", "physics-original", "proposed")


@dataclass(frozen=True)
class Variant:
    name: str
    schedule: NoiseSchedule
    bound: ImbalanceBound
    eta: float


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Train and sample the no-physics, physics-with-linear-schedule and learned-schedule denoisers."
    )
    parser.add_argument("--dataset", required=True, help="Dataset directory written by gen_data.py.")
    parser.add_argument(
        "--schedule",
        help="Learned schedule.json to reuse (default: learn one from the dataset first).",
    )
    parser.add_argument("--eta", type=float, help="Physics weight of the physics variants (default: ddpm.physicsWeight).")
    parser.add_argument("--steps", type=int, help="Optimizer steps per variant (default: ddpm.steps).")
    parser.add_argument("--samples", type=int, help="Samples drawn per variant (default: sampling.samples).")
    parser.add_argument("--seed", type=int, help="Global seed (default: seed from the config).")
    parser.add_argument("--out", help="Output directory for ablation.json and ablation.txt.")
    parser.add_argument("--config", help="Pipeline config JSON (default: config/pipeline.json).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    args = parser.parse_args(argv)
    args.eta = env_float("ETA", args.eta)
    args.steps = env_int("STEPS", args.steps)
    args.out = env_override("OUT", args.out)
    if not args.out:
        parser.error("--out (or PFDIFF_OUT) is required.")
    if args.eta is not None and args.eta <= 0.0:
        parser.error("--eta must be > 0; the no-physics variant already covers eta = 0.")
    if args.steps is not None and args.steps < 1:
        parser.error("--steps must be >= 1.")
    if args.samples is not None and args.samples < 1:
        parser.error("--samples must be >= 1.")
    return args


def build_variants(
    config: PipelineConfig,
    grid: GridTensors,
    dataset: PowerFlowDataset,
    learned_path: Path | None = None,
) -> list[Variant]:
    linear, linear_bound = resolve_schedule("linear", config, grid, dataset)
    if learned_path is not None:
        learned, learned_bound = schedule_from_json(read_json(learned_path))
    else:
        gamma_terminal = resolve_gamma_terminal(config, grid, dataset.bounds)
        result = train_schedule(dataset.normalized(), grid, dataset.bounds, config, gamma_terminal)
        learned, learned_bound = result.schedule, result.bound
    eta = config.ddpm.physics_weight
    return [
        Variant("no-physics", linear, linear_bound, 0.0),
        Variant("physics-original", linear, linear_bound, eta),
        Variant("proposed", learned, learned_bound, eta),
    ]


def run_variant(variant: Variant, dataset: PowerFlowDataset, grid: GridTensors, config: PipelineConfig) -> ImbalanceSummary:
    variant_config = config.with_overrides(ddpm={"physics_weight": variant.eta})
    run = fit_denoiser(dataset, variant.schedule, variant.bound, variant_config)
    run.model.eval()
    sampler = Sampler(
        model=run.model,
        schedule=variant.schedule,
        bound=variant.bound,
        case=dataset.case,
        bounds=dataset.bounds,
        step=run.step,
    )
    return mean_imbalance(draw_samples(sampler, variant_config).samples, grid)


def ablation_payload(
    config: PipelineConfig,
    dataset: PowerFlowDataset,
    real: ImbalanceSummary,
    results: dict[str, ImbalanceSummary],
    variants: list[Variant],
) -> dict[str, Any]:
    means = [results[name].mean for name in VARIANTS]
    return {
        "version": VERSION,
        "generatedAt": utc_now_iso(),
        "grid": dataset.case.name,
        "seed": config.seed,
        "realData": real.to_json(),
        "variants": [
            {
                "name": variant.name,
                "schedule": variant.schedule.provenance,
                "eta": variant.eta,
                "gammaTerminal": variant.bound.gamma_terminal,
                "meanImbalance": results[variant.name].to_json(),
            }
            for variant in variants
        ],
        "orderingHolds": bool(means[2] < means[1] < means[0]),
        "config": config_to_json(config),
    }


def format_ablation_table(payload: dict[str, Any]) -> str:
    lines = [f"grid {payload['grid']}  seed {payload['seed']}", ""]
    lines.append(f"{'real data':<20}{payload['realData']['mean']:>14.6g}")
    for row in payload["variants"]:
        lines.append(f"{row['name']:<20}{row['meanImbalance']['mean']:>14.6g}  ({row['schedule']}, eta={row['eta']:g})")
    lines.append("")
    lines.append(f"proposed < physics-original < no-physics: {'yes' if payload['orderingHolds'] else 'no'}")
    return "\n".join(lines) + "\n"


def _run(args: argparse.Namespace) -> int:
    config = with_cli_overrides(
        resolve_config(args.config),
        seed=args.seed,
        ddpm={"physics_weight": args.eta, "steps": args.steps},
        sampling={"samples": args.samples},
    )
    out_dir = Path(args.out)
    dataset = load_dataset(Path(args.dataset))
    grid = make_grid_tensors(dataset.case, dataset.layout)
    variants = build_variants(config, grid, dataset, Path(args.schedule) if args.schedule else None)
    results = {variant.name: run_variant(variant, dataset, grid, config) for variant in variants}

    payload = ablation_payload(config, dataset, mean_imbalance(dataset.samples, grid), results, variants)
    write_json(out_dir / "ablation.json", payload)
    table = format_ablation_table(payload)
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"Wrote ablation of {len(variants)} variants on {dataset.case.name} to {out_dir}.")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.verbose)
    return run_stage(lambda: _run(args))


if __name__ == "__main__":
    raise SystemExit(main())
