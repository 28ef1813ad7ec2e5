#!/usr/bin/env python3
from __future__ import annotations

import argparse
from dataclasses import dataclass
import json
from pathlib import Path
from typing import Any

import torch

from diffusion import ImbalanceBound, NoiseSchedule, SampleResult, sample, schedule_from_json
from grid_model import NetworkCase, NormalizationBounds, bounds_from_json, make_grid_tensors, make_layout, parse_case
from nn_core import Denoiser, denoiser_from_architecture, load_checkpoint
from pf_engine import PowerFlowDataset, residual_imbalance, save_dataset, torch_grid
from pipeline_utils import (
    PipelineConfig,
    configure_logging,
    env_int,
    env_override,
    resolve_config,
    run_stage,
    stream_seed,
    with_cli_overrides,
    write_csv,
)


@dataclass(frozen=True)
class Sampler:
    model: Denoiser
    schedule: NoiseSchedule
    bound: ImbalanceBound
    case: NetworkCase
    bounds: NormalizationBounds
    step: int


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Draw synthetic power flow samples from a trained denoiser.")
    parser.add_argument("--checkpoint", required=True, help="checkpoint.pt written by train_ddpm.py.")
    parser.add_argument("--n", type=int, help="Number of samples (default: sampling.samples, 500).")
    parser.add_argument("--seed", type=int, help="Global seed (default: seed from the config).")
    parser.add_argument("--batch-size", type=int, help="Reverse chains run together (default: sampling.batchSize).")
    parser.add_argument("--out", help="Output dataset directory; trace.csv is written next to the samples.")
    parser.add_argument("--config", help="Pipeline config JSON (default: config/pipeline.json).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    args = parser.parse_args(argv)
    args.n = env_int("N", args.n)
    args.out = env_override("OUT", args.out)
    if args.n is not None and args.n < 1:
        parser.error("--n must be >= 1.")
    if args.batch_size is not None and args.batch_size < 1:
        parser.error("--batch-size must be >= 1.")
    if not args.out:
        parser.error("--out (or PFDIFF_OUT) is required.")
    return args


def load_sampler(payload: dict[str, Any]) -> Sampler:
    model = denoiser_from_architecture(payload["architecture"])
    model.load_state_dict(payload["stateDict"])
    model.eval()
    schedule, bound = schedule_from_json(payload["schedule"])
    case = parse_case(json.dumps(payload["case"]), name=str(payload["case"].get("name") or "case"))
    bounds = bounds_from_json(payload["bounds"])
    return Sampler(model=model, schedule=schedule, bound=bound, case=case, bounds=bounds, step=int(payload.get("step", 0)))


def draw_samples(sampler: Sampler, config: PipelineConfig) -> SampleResult:
    layout = make_layout(sampler.case)
    grid = torch_grid(make_grid_tensors(sampler.case, layout), torch.float32)
    generator = torch.Generator().manual_seed(stream_seed(config.seed, "sampling"))
    return sample(
        sampler.model,
        sampler.schedule,
        config.sampling.samples,
        generator,
        grid,
        sampler.bounds,
        batch_size=config.sampling.batch_size,
    )


def write_trace(path: Path, trace: Any, bound: ImbalanceBound) -> None:
    gammas = bound.values()
    write_csv(path, ["t", "gamma", "imbalance"], ([t, gammas[t], trace[t]] for t in range(bound.steps, -1, -1)))


def _run(args: argparse.Namespace) -> int:
    config = with_cli_overrides(
        resolve_config(args.config),
        seed=args.seed,
        sampling={"samples": args.n, "batch_size": args.batch_size},
    )
    out_dir = Path(args.out)
    sampler = load_sampler(load_checkpoint(Path(args.checkpoint)))
    result = draw_samples(sampler, config)
    layout = make_layout(sampler.case)
    dataset = PowerFlowDataset(
        case=sampler.case,
        layout=layout,
        bounds=sampler.bounds,
        samples=result.samples,
        metadata={
            "generatorOfRecord": f"denoising diffusion model ({sampler.schedule.provenance} schedule)",
            "seed": config.seed,
            "checkpoint": str(args.checkpoint),
            "checkpointStep": sampler.step,
        },
    )
    save_dataset(dataset, out_dir, config)
    write_trace(out_dir / "trace.csv", result.trace, sampler.bound)
    imbalance = residual_imbalance(result.samples, make_grid_tensors(sampler.case, layout)).mean
    print(f"Wrote {dataset.size} samples to {out_dir} (mean imbalance {float(imbalance.mean()):.6f} p.u.).")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.verbose)
    return run_stage(lambda: _run(args))


if __name__ == "__main__":
    raise SystemExit(main())
