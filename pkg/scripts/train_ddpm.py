#!/usr/bin/env python3
from __future__ import annotations

import argparse
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Any

import torch

from diffusion import (
    ImbalanceBound,
    NoiseSchedule,
    bounds_tensors,
    schedule_from_json,
    schedule_to_json,
    train_ddpm,
)
from grid_model import GridTensors, bounds_to_json, case_to_native, make_grid_tensors
from nn_core import (
    Denoiser,
    build_denoiser,
    capture_rng_state,
    count_parameters,
    denoiser_architecture,
    denoiser_from_architecture,
    load_checkpoint,
    make_optimizer,
    restore_rng_state,
    save_checkpoint,
)
from pf_engine import PowerFlowDataset, load_dataset, torch_grid
from pipeline_utils import (
    PipelineConfig,
    config_to_json,
    configure_logging,
    env_float,
    env_int,
    env_override,
    parse_pipeline_config,
    read_json,
    read_jsonl,
    resolve_config,
    run_stage,
    stream_seed,
    with_cli_overrides,
    write_jsonl,
)
from schedule_learner import baseline_schedule, resolve_gamma_terminal


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DdpmRun:
    model: Denoiser
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int
    rows: list[dict[str, Any]]
    architecture: dict[str, Any]


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Train the physics-informed denoiser.")
    parser.add_argument("--dataset", required=True, help="Dataset directory written by gen_data.py.")
    parser.add_argument(
        "--schedule",
        help="'linear' or 'learned:<path to schedule.json>' (default: linear).",
    )
    parser.add_argument("--eta", type=float, help="Physics loss weight (default: ddpm.physicsWeight, 1.0).")
    parser.add_argument("--steps", type=int, help="Optimizer steps to run (default: ddpm.steps from the config).")
    parser.add_argument("--seed", type=int, help="Global seed (default: seed from the config).")
    parser.add_argument("--resume", help="Checkpoint to continue from; its schedule is reused.")
    parser.add_argument("--out", help="Output directory for checkpoint.pt and metrics.jsonl.")
    parser.add_argument("--config", help="Pipeline config JSON (default: config/pipeline.json).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    args = parser.parse_args(argv)
    args.eta = env_float("ETA", args.eta)
    args.steps = env_int("STEPS", args.steps)
    args.schedule = env_override("SCHEDULE", args.schedule) or "linear"
    args.out = env_override("OUT", args.out)
    if not args.out:
        parser.error("--out (or PFDIFF_OUT) is required.")
    if args.eta is not None and args.eta < 0.0:
        parser.error("--eta must be >= 0.")
    if args.steps is not None and args.steps < 1:
        parser.error("--steps must be >= 1.")
    if args.schedule != "linear" and not args.schedule.startswith("learned:"):
        parser.error("--schedule must be 'linear' or 'learned:<path>'.")
    return args


def resolve_schedule(
    choice: str,
    config: PipelineConfig,
    grid: GridTensors,
    dataset: PowerFlowDataset,
) -> tuple[NoiseSchedule, ImbalanceBound]:
    if choice == "linear":
        schedule = baseline_schedule(config.schedule)
        gamma_terminal = resolve_gamma_terminal(config, grid, dataset.bounds)
        return schedule, ImbalanceBound(steps=schedule.steps, gamma_terminal=gamma_terminal)
    if choice.startswith("learned:"):
        return schedule_from_json(read_json(Path(choice[len("learned:") :])))
    raise ValueError(f"Unknown schedule choice '{choice}'.")


def fit_denoiser(
    dataset: PowerFlowDataset,
    schedule: NoiseSchedule,
    bound: ImbalanceBound,
    config: PipelineConfig,
    resume: dict[str, Any] | None = None,
) -> DdpmRun:
    dtype = torch.float32
    data = torch.as_tensor(dataset.normalized(), dtype=dtype)
    grid = torch_grid(make_grid_tensors(dataset.case, dataset.layout), dtype)
    bounds = bounds_tensors(dataset.bounds, dtype)

    seed = stream_seed(config.seed, "ddpm")
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    if resume is not None:
        architecture = resume["architecture"]
        model = denoiser_from_architecture(architecture)
    else:
        architecture = denoiser_architecture(config.ddpm, dataset.layout.dimension, schedule.steps)
        model = build_denoiser(config.ddpm, dataset.layout.dimension, schedule.steps)
    optimizer = make_optimizer(model, config.ddpm.learning_rate, config.ddpm.betas)
    start_step = 0
    if resume is not None:
        model.load_state_dict(resume["stateDict"])
        optimizer.load_state_dict(resume["optimizerState"])
        restore_rng_state(resume.get("rngState", {}), generator)
        start_step = int(resume.get("step", 0))

    rows = train_ddpm(model, optimizer, data, schedule, bound, grid, bounds, config.ddpm, generator, start_step=start_step)
    return DdpmRun(
        model=model,
        optimizer=optimizer,
        generator=generator,
        step=start_step + config.ddpm.steps,
        rows=rows,
        architecture=architecture,
    )


def checkpoint_payload(
    run: DdpmRun,
    dataset: PowerFlowDataset,
    schedule: NoiseSchedule,
    bound: ImbalanceBound,
    config: PipelineConfig,
) -> dict[str, Any]:
    return {
        "architecture": run.architecture,
        "parameters": count_parameters(run.model),
        "stateDict": run.model.state_dict(),
        "optimizerState": run.optimizer.state_dict(),
        "rngState": capture_rng_state(run.generator),
        "step": run.step,
        "schedule": schedule_to_json(schedule, bound),
        "case": case_to_native(dataset.case),
        "bounds": bounds_to_json(dataset.bounds),
        "config": config_to_json(config),
    }


def base_config(config_path: str | None, resume: dict[str, Any] | None) -> PipelineConfig:
    """A resumed run keeps the config it was trained with; only explicit flags override it."""
    if resume is None:
        return resolve_config(config_path)
    if config_path:
        logger.warning("Ignoring --config %s: resuming with the checkpoint's config.", config_path)
    return parse_pipeline_config(resume["config"])


def _run(args: argparse.Namespace) -> int:
    resume = load_checkpoint(Path(args.resume)) if args.resume else None
    config = with_cli_overrides(
        base_config(args.config, resume),
        seed=args.seed,
        ddpm={"physics_weight": args.eta, "steps": args.steps},
    )
    out_dir = Path(args.out)
    dataset = load_dataset(Path(args.dataset))
    grid = make_grid_tensors(dataset.case, dataset.layout)
    if resume is not None:
        schedule, bound = schedule_from_json(resume["schedule"])
    else:
        schedule, bound = resolve_schedule(args.schedule, config, grid, dataset)

    run = fit_denoiser(dataset, schedule, bound, config, resume)
    save_checkpoint(out_dir / "checkpoint.pt", checkpoint_payload(run, dataset, schedule, bound, config))
    metrics_path = out_dir / "metrics.jsonl"
    previous = read_jsonl(metrics_path) if resume is not None and metrics_path.exists() else []
    write_jsonl(metrics_path, [row for row in previous if row["step"] <= run.step - config.ddpm.steps] + run.rows)
    final = run.rows[-1]
    print(
        f"Trained {config.ddpm.steps} steps to step {run.step} with eta={config.ddpm.physics_weight} "
        f"({schedule.provenance} schedule, final L={final['loss']:.6f}, L_R={final['lossPhysics']:.6f})."
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.verbose)
    return run_stage(lambda: _run(args))


if __name__ == "__main__":
    raise SystemExit(main())
