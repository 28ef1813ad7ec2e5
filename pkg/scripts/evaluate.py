#!/usr/bin/env python3
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from diffusion import ImbalanceBound
from eval_metrics import (
    LinearityScore,
    build_report,
    constraint_satisfaction,
    distribution_fidelity,
    format_report_table,
    linearity_score,
    mean_imbalance,
    reverse_trace_check,
)
from grid_model import load_case, make_grid_tensors, make_layout
from pf_engine import load_dataset
from pipeline_utils import (
    configure_logging,
    env_override,
    read_csv,
    resolve_case_source,
    resolve_config,
    run_stage,
    write_json,
)


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Score a synthetic dataset against real data.")
    parser.add_argument("--synthetic", required=True, help="Synthetic dataset directory written by sample.py.")
    parser.add_argument("--real", required=True, help="Real dataset directory written by gen_data.py.")
    parser.add_argument("--case", help="Case file overriding the one stored with the real dataset.")
    parser.add_argument("--curve", help="forward-curve.csv from train_schedule.py for linearity scores.")
    parser.add_argument("--trace", help="Reverse trace CSV (default: trace.csv in the synthetic directory, if present).")
    parser.add_argument("--model-tag", default="ddpm", help="Label stored in the report (default: ddpm).")
    parser.add_argument("--out", help="Output directory for report.json and report.txt.")
    parser.add_argument("--config", help="Pipeline config JSON (default: config/pipeline.json).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    args = parser.parse_args(argv)
    args.out = env_override("OUT", args.out)
    if not args.out:
        parser.error("--out (or PFDIFF_OUT) is required.")
    return args


def _bound_from_rows(rows: list[dict[str, str]], path: Path) -> tuple[ImbalanceBound, dict[int, dict[str, str]]]:
    by_step = {int(row["t"]): row for row in rows}
    steps = max(by_step)
    if sorted(by_step) != list(range(steps + 1)):
        raise ValueError(f"{path}: expected one row for every t = 0..{steps}.")
    return ImbalanceBound(steps=steps, gamma_terminal=float(by_step[steps]["gamma"])), by_step


def _curve_scores(path: Path) -> dict[str, LinearityScore]:
    bound, by_step = _bound_from_rows(read_csv(path), path)
    scores = {}
    for column in ("baseline", "learned"):
        curve = np.array([float(by_step[t][column]) for t in range(bound.steps + 1)])
        scores[column] = linearity_score(curve, bound)
    return scores


def _trace_fraction(path: Path) -> float:
    bound, by_step = _bound_from_rows(read_csv(path), path)
    trace = np.array([float(by_step[t]["imbalance"]) for t in range(bound.steps + 1)])
    return reverse_trace_check(trace, bound)


def _run(args: argparse.Namespace) -> int:
    config = resolve_config(args.config)
    out_dir = Path(args.out)
    synthetic = load_dataset(Path(args.synthetic))
    real = load_dataset(Path(args.real))
    case = real.case
    if args.case:
        case = load_case(resolve_case_source(args.case), angle_bound=config.grid.angle_bound)
    layout = make_layout(case)
    if synthetic.layout.dimension != layout.dimension or real.layout.dimension != layout.dimension:
        raise ValueError("synthetic, real and case layouts do not share a dimension.")
    grid = make_grid_tensors(case, layout)
    tolerance = config.evaluation.constraint_tolerance

    half = real.size // 2
    noise_floor = distribution_fidelity(real.samples[:half], real.samples[half:]) if half >= 1 else None
    trace_path = Path(args.trace) if args.trace else Path(args.synthetic) / "trace.csv"
    report = build_report(
        case=case,
        model_tag=args.model_tag,
        imbalance=mean_imbalance(synthetic.samples, grid),
        rates=constraint_satisfaction(synthetic.samples, case, grid, tolerance),
        fidelity=distribution_fidelity(synthetic.samples, real.samples),
        labels=layout.labels(case),
        seeds={"synthetic": synthetic.metadata.get("seed"), "real": real.metadata.get("seed")},
        real_imbalance=mean_imbalance(real.samples, grid),
        noise_floor=noise_floor,
        linearity=_curve_scores(Path(args.curve)) if args.curve else None,
        trace_fraction=_trace_fraction(trace_path) if trace_path.exists() else None,
        linearity_factor=config.evaluation.linearity_factor,
    )
    write_json(out_dir / "report.json", report)
    table = format_report_table(report)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"Wrote report for {synthetic.size} synthetic vs {real.size} real samples to {out_dir}.")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.verbose)
    return run_stage(lambda: _run(args))


if __name__ == "__main__":
    raise SystemExit(main())
