#!/usr/bin/env python3
from __future__ import annotations

import argparse
from pathlib import Path

from grid_model import load_case
from pf_engine import generate_dataset, save_dataset
from pipeline_utils import (
    VERSION,
    DatasetAbortError,
    configure_logging,
    env_int,
    env_override,
    resolve_case_source,
    resolve_config,
    run_stage,
    utc_now_iso,
    with_cli_overrides,
    write_json,
)


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Generate a solved, feasibility-checked power flow dataset.")
    parser.add_argument("--case", help="Case file path or http(s) URL (default: grid.case from the config).")
    parser.add_argument("--n", type=int, help="Number of samples (default: dataset.samples from the config).")
    parser.add_argument("--seed", type=int, help="Global seed (default: seed from the config).")
    parser.add_argument("--workers", type=int, help="Worker processes for sample generation (default: 1).")
    parser.add_argument("--out", help="Output dataset directory.")
    parser.add_argument("--config", help="Pipeline config JSON (default: config/pipeline.json).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    args = parser.parse_args(argv)
    args.n = env_int("N", args.n)
    args.out = env_override("OUT", args.out)
    if args.n is not None and args.n < 1:
        parser.error("--n must be >= 1.")
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1.")
    if not args.out:
        parser.error("--out (or PFDIFF_OUT) is required.")
    return args


def _run(args: argparse.Namespace) -> int:
    config = with_cli_overrides(
        resolve_config(args.config),
        seed=args.seed,
        workers=args.workers,
        grid={"case": env_override("CASE", args.case)},
        dataset={"samples": args.n},
    )
    out_dir = Path(args.out)
    case = load_case(resolve_case_source(config.grid.case), angle_bound=config.grid.angle_bound)
    try:
        dataset = generate_dataset(case, config.dataset.samples, config)
    except DatasetAbortError as exc:
        write_json(
            out_dir / ".gen-data-status.json",
            {
                "version": VERSION,
                "generatedAt": utc_now_iso(),
                "case": case.name,
                "requested": config.dataset.samples,
                "error": str(exc),
                "diagnostics": exc.diagnostics,
            },
        )
        raise
    save_dataset(dataset, out_dir, config)
    rejection = dataset.metadata["rejection"]
    print(
        f"Wrote {dataset.size} samples of {case.name} (D={dataset.layout.dimension}) to {out_dir} "
        f"(rejected {rejection['rejected']}, {100.0 * rejection['rate']:.1f}%)."
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.verbose)
    return run_stage(lambda: _run(args))


if __name__ == "__main__":
    raise SystemExit(main())
