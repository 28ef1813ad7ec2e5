from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
import csv
import json
import logging
import math
import os
import zlib
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import requests


VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

ENV_PREFIX = "PFDIFF_"
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[1] / "config" / "pipeline.json"


class PipelineError(RuntimeError):
    pass


class CaseParseError(PipelineError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class NumericalError(PipelineError):
    pass


class PowerFlowDivergedError(NumericalError):
    def __init__(self, message: str, mismatch: float, iterations: int) -> None:
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(f"{message} (mismatch {mismatch:.3e} p.u. after {iterations} iterations)")


class SingularJacobianError(NumericalError):
    pass


class InfeasibleDispatchError(NumericalError):
    pass


class DatasetAbortError(NumericalError):
    def __init__(self, message: str, diagnostics: dict[str, Any]) -> None:
        self.diagnostics = diagnostics
        super().__init__(message)


class NonFiniteLossError(NumericalError):
    def __init__(self, message: str, step: int | None = None, components: dict[str, float] | None = None) -> None:
        self.step = step
        self.components = components or {}
        super().__init__(message)


class ScheduleValidationError(NumericalError):
    def __init__(self, message: str, step: int) -> None:
        self.step = step
        super().__init__(f"t={step}: {message}")


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


def read_json(path: Path) -> Any:
    with path.open("r", encoding="utf-8") as handle:
        return json.load(handle)


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, ensure_ascii=False, indent=2, sort_keys=False)
        handle.write("\n")


def write_jsonl(path: Path, rows: Iterable[dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False, sort_keys=False))
            handle.write("\n")


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    with path.open("r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(value) for value in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def _csv_cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (CaseParseError, ValueError)):
        return EXIT_USAGE
    if isinstance(exc, (OSError, requests.RequestException)):
        return EXIT_IO
    raise exc


def stream_seed(seed: int, name: str) -> int:
    """Derive the seed of a named RNG stream (data, schedule, ddpm, sampling) from the global seed."""
    state = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]).generate_state(1)
    return int(state[0])


def stream_rng(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng([stream_seed(seed, name), *[int(value) for value in index]])


def env_override(name: str, value: Any) -> Any:
    if value is not None:
        return value
    return os.environ.get(f"{ENV_PREFIX}{name}")


@dataclass(frozen=True)
class GridConfig:
    case: str = "config/cases/case14.m"
    angle_bound: float = math.pi / 6.0
    demand_range: tuple[float, float] = (0.8, 1.2)
    cost_range: tuple[float, float] = (0.5, 1.5)
    voltage_setpoint_range: tuple[float, float] = (0.95, 1.05)
    loss_factor: float = 0.02
    min_span: float = 1e-3
    calibrate_angle_window: bool = True
    noise_imbalance_target: float | None = None


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-8
    max_iterations: int = 30
    enforce_reactive_limits: bool = True
    slack_reactive_adjustments: int = 6
    constraint_tolerance: float = 1e-6


@dataclass(frozen=True)
class DatasetConfig:
    samples: int = 70000
    rejection_window: int = 200
    max_rejection_rate: float = 0.9
    max_attempts_per_sample: int = 50


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 200
    gamma_terminal: float | None = None
    gamma_draws: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.05
    hidden_widths: tuple[int, ...] = (512, 256)
    batch_size: int = 1024
    epochs: int = 200
    learning_rate: float = 1e-3
    patience: int = 10
    min_relative_improvement: float = 1e-4
    noise_per_step: bool = False
    curve_draws: int = 4


@dataclass(frozen=True)
class DdpmConfig:
    hidden_widths: tuple[int, ...] = (256, 128, 64, 32, 64, 128, 256)
    time_embedding_width: int = 64
    attention: bool = True
    attention_tokens: int = 4
    attention_heads: int = 1
    prediction: str = "epsilon"
    physics_weight: float = 1.0
    physics_attach: str = "posterior_mean"
    batch_size: int = 1024
    steps: int = 20000
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    log_every: int = 100
    expected_parameters: int | None = None


@dataclass(frozen=True)
class SamplingConfig:
    samples: int = 500
    batch_size: int = 500


@dataclass(frozen=True)
class EvaluationConfig:
    constraint_tolerance: float = 1e-6
    linearity_factor: float = 2.0


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 20240601
    workers: int = 1
    grid: GridConfig = field(default_factory=GridConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ddpm: DdpmConfig = field(default_factory=DdpmConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def with_overrides(self, **sections: dict[str, Any]) -> PipelineConfig:
        """Return a copy with fields replaced section by section, e.g. ``ddpm={"physics_weight": 0.0}``."""
        updated: dict[str, Any] = {}
        for name, values in sections.items():
            if name in ("seed", "workers"):
                updated[name] = values
                continue
            clean = {key: value for key, value in values.items() if value is not None}
            if clean:
                updated[name] = replace(getattr(self, name), **clean)
        config = replace(self, **updated)
        validate_config(config)
        return config


_SECTION_KEYS: dict[str, dict[str, str]] = {
    "grid": {
        "case": "case",
        "angleBoundRad": "angle_bound",
        "demandRange": "demand_range",
        "costRange": "cost_range",
        "voltageSetpointRange": "voltage_setpoint_range",
        "lossFactor": "loss_factor",
        "minSpan": "min_span",
        "calibrateAngleWindow": "calibrate_angle_window",
        "noiseImbalanceTarget": "noise_imbalance_target",
    },
    "solver": {
        "tolerance": "tolerance",
        "maxIterations": "max_iterations",
        "enforceReactiveLimits": "enforce_reactive_limits",
        "slackReactiveAdjustments": "slack_reactive_adjustments",
        "constraintTolerance": "constraint_tolerance",
    },
    "dataset": {
        "samples": "samples",
        "rejectionWindow": "rejection_window",
        "maxRejectionRate": "max_rejection_rate",
        "maxAttemptsPerSample": "max_attempts_per_sample",
    },
    "schedule": {
        "steps": "steps",
        "gammaTerminal": "gamma_terminal",
        "gammaDraws": "gamma_draws",
        "betaStart": "beta_start",
        "betaEnd": "beta_end",
        "hiddenWidths": "hidden_widths",
        "batchSize": "batch_size",
        "epochs": "epochs",
        "learningRate": "learning_rate",
        "patience": "patience",
        "minRelativeImprovement": "min_relative_improvement",
        "noisePerStep": "noise_per_step",
        "curveDraws": "curve_draws",
    },
    "ddpm": {
        "hiddenWidths": "hidden_widths",
        "timeEmbeddingWidth": "time_embedding_width",
        "attention": "attention",
        "attentionTokens": "attention_tokens",
        "attentionHeads": "attention_heads",
        "prediction": "prediction",
        "physicsWeight": "physics_weight",
        "physicsAttach": "physics_attach",
        "batchSize": "batch_size",
        "steps": "steps",
        "learningRate": "learning_rate",
        "betas": "betas",
        "logEvery": "log_every",
        "expectedParameters": "expected_parameters",
    },
    "sampling": {
        "samples": "samples",
        "batchSize": "batch_size",
    },
    "evaluation": {
        "constraintTolerance": "constraint_tolerance",
        "linearityFactor": "linearity_factor",
    },
}

_SECTION_TYPES = {
    "grid": GridConfig,
    "solver": SolverConfig,
    "dataset": DatasetConfig,
    "schedule": ScheduleConfig,
    "ddpm": DdpmConfig,
    "sampling": SamplingConfig,
    "evaluation": EvaluationConfig,
}


def _coerce(value: Any, default: Any, label: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{label}: must be true or false.")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not value:
            raise ValueError(f"{label}: must be a non-empty array.")
        item_type = type(default[0]) if default else float
        try:
            return tuple(item_type(item) for item in value)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{label}: invalid array item.") from exc
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValueError(f"{label}: must be an integer.")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{label}: must be numeric.")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str) or not value.strip():
            raise ValueError(f"{label}: must be a non-empty string.")
        return value.strip()
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{label}: must be numeric or null.")
    return value


def _parse_section(name: str, raw: Any) -> Any:
    section_type = _SECTION_TYPES[name]
    defaults = section_type()
    if raw is None:
        return defaults
    if not isinstance(raw, dict):
        raise ValueError(f"{name}: must be an object.")
    keys = _SECTION_KEYS[name]
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise ValueError(f"{name}: unknown keys {unknown}.")
    values: dict[str, Any] = {}
    for json_key, attr in keys.items():
        if json_key not in raw:
            continue
        values[attr] = _coerce(raw[json_key], getattr(defaults, attr), f"{name}.{json_key}")
    return replace(defaults, **values)


def validate_config(config: PipelineConfig) -> None:
    def check(condition: bool, label: str, message: str) -> None:
        if not condition:
            raise ValueError(f"{label}: {message}")

    check(config.workers >= 1, "workers", "must be >= 1.")
    grid = config.grid
    check(0.0 < grid.angle_bound <= math.pi, "grid.angleBoundRad", "must be in (0, pi].")
    check(
        grid.noise_imbalance_target is None or grid.noise_imbalance_target > 0.0,
        "grid.noiseImbalanceTarget",
        "must be > 0 or null.",
    )
    for label, pair in (
        ("grid.demandRange", grid.demand_range),
        ("grid.costRange", grid.cost_range),
        ("grid.voltageSetpointRange", grid.voltage_setpoint_range),
    ):
        check(len(pair) == 2 and 0.0 < pair[0] <= pair[1], label, "must be [lo, hi] with 0 < lo <= hi.")
    check(grid.loss_factor >= 0.0, "grid.lossFactor", "must be >= 0.")
    check(grid.min_span > 0.0, "grid.minSpan", "must be > 0.")
    solver = config.solver
    check(solver.tolerance > 0.0, "solver.tolerance", "must be > 0.")
    check(solver.max_iterations >= 1, "solver.maxIterations", "must be >= 1.")
    check(solver.slack_reactive_adjustments >= 0, "solver.slackReactiveAdjustments", "must be >= 0.")
    check(solver.constraint_tolerance >= 0.0, "solver.constraintTolerance", "must be >= 0.")
    dataset = config.dataset
    check(dataset.samples >= 1, "dataset.samples", "must be >= 1.")
    check(dataset.rejection_window >= 1, "dataset.rejectionWindow", "must be >= 1.")
    check(0.0 < dataset.max_rejection_rate <= 1.0, "dataset.maxRejectionRate", "must be in (0, 1].")
    check(dataset.max_attempts_per_sample >= 1, "dataset.maxAttemptsPerSample", "must be >= 1.")
    schedule = config.schedule
    check(schedule.steps >= 1, "schedule.steps", "must be >= 1.")
    check(
        schedule.gamma_terminal is None or schedule.gamma_terminal > 0.0,
        "schedule.gammaTerminal",
        "must be > 0 or null.",
    )
    check(schedule.gamma_draws >= 1, "schedule.gammaDraws", "must be >= 1.")
    check(0.0 < schedule.beta_start <= schedule.beta_end < 1.0, "schedule.betaStart", "need 0 < betaStart <= betaEnd < 1.")
    check(all(width >= 1 for width in schedule.hidden_widths), "schedule.hiddenWidths", "widths must be >= 1.")
    check(schedule.batch_size >= 1, "schedule.batchSize", "must be >= 1.")
    check(schedule.epochs >= 1, "schedule.epochs", "must be >= 1.")
    check(schedule.learning_rate > 0.0, "schedule.learningRate", "must be > 0.")
    check(schedule.patience >= 1, "schedule.patience", "must be >= 1.")
    check(schedule.curve_draws >= 1, "schedule.curveDraws", "must be >= 1.")
    ddpm = config.ddpm
    widths = ddpm.hidden_widths
    check(len(widths) % 2 == 1, "ddpm.hiddenWidths", "must have an odd number of layers around one bottleneck.")
    half = len(widths) // 2
    check(
        all(widths[index] == widths[-1 - index] for index in range(half)),
        "ddpm.hiddenWidths",
        "must be symmetric around the bottleneck.",
    )
    check(ddpm.time_embedding_width >= 2 and ddpm.time_embedding_width % 2 == 0, "ddpm.timeEmbeddingWidth", "must be even and >= 2.")
    check(ddpm.attention_tokens >= 1, "ddpm.attentionTokens", "must be >= 1.")
    check(ddpm.attention_heads >= 1, "ddpm.attentionHeads", "must be >= 1.")
    if ddpm.attention:
        bottleneck = widths[half]
        check(
            bottleneck % ddpm.attention_tokens == 0
            and (bottleneck // ddpm.attention_tokens) % ddpm.attention_heads == 0,
            "ddpm.attentionTokens",
            "bottleneck width must split evenly into tokens and heads.",
        )
    check(ddpm.prediction in ("epsilon", "x0"), "ddpm.prediction", "must be 'epsilon' or 'x0'.")
    check(ddpm.physics_weight >= 0.0, "ddpm.physicsWeight", "must be >= 0.")
    check(ddpm.physics_attach in ("posterior_mean", "x0"), "ddpm.physicsAttach", "must be 'posterior_mean' or 'x0'.")
    check(ddpm.batch_size >= 1, "ddpm.batchSize", "must be >= 1.")
    check(ddpm.steps >= 1, "ddpm.steps", "must be >= 1.")
    check(ddpm.learning_rate > 0.0, "ddpm.learningRate", "must be > 0.")
    check(len(ddpm.betas) == 2 and all(0.0 <= beta < 1.0 for beta in ddpm.betas), "ddpm.betas", "must be two decays in [0, 1).")
    check(ddpm.log_every >= 1, "ddpm.logEvery", "must be >= 1.")
    check(config.sampling.samples >= 1, "sampling.samples", "must be >= 1.")
    check(config.sampling.batch_size >= 1, "sampling.batchSize", "must be >= 1.")
    check(config.evaluation.constraint_tolerance >= 0.0, "evaluation.constraintTolerance", "must be >= 0.")
    check(config.evaluation.linearity_factor >= 1.0, "evaluation.linearityFactor", "must be >= 1.")


def parse_pipeline_config(raw: Any) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ValueError("Config root must be an object.")
    known = {"version", "seed", "workers", *_SECTION_TYPES}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"Config root: unknown keys {unknown}.")
    defaults = PipelineConfig()
    seed = _coerce(raw.get("seed", defaults.seed), defaults.seed, "seed")
    workers = _coerce(raw.get("workers", defaults.workers), defaults.workers, "workers")
    sections = {name: _parse_section(name, raw.get(name)) for name in _SECTION_TYPES}
    config = PipelineConfig(seed=seed, workers=workers, **sections)
    validate_config(config)
    return config


def load_pipeline_config(path: Path | None = None) -> PipelineConfig:
    path = path or DEFAULT_CONFIG_PATH
    return parse_pipeline_config(read_json(path))


def config_to_json(config: PipelineConfig) -> dict[str, Any]:
    payload: dict[str, Any] = {"version": VERSION, "seed": config.seed, "workers": config.workers}
    for name, keys in _SECTION_KEYS.items():
        section = asdict(getattr(config, name))
        payload[name] = {
            json_key: list(section[attr]) if isinstance(section[attr], tuple) else section[attr]
            for json_key, attr in keys.items()
        }
    return payload


REPO_ROOT = Path(__file__).resolve().parents[1]


def env_int(name: str, value: int | None) -> int | None:
    raw = env_override(name, value)
    if raw is None or isinstance(raw, int):
        return raw
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_PREFIX}{name}: must be an integer.") from exc


def env_float(name: str, value: float | None) -> float | None:
    raw = env_override(name, value)
    if raw is None or isinstance(raw, float):
        return raw
    try:
        return float(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_PREFIX}{name}: must be numeric.") from exc


def resolve_config(config_path: str | None) -> PipelineConfig:
    path = env_override("CONFIG", config_path)
    return load_pipeline_config(Path(path) if path else None)


def resolve_case_source(source: str) -> str:
    """Relative case paths are tried against the working directory, then the repository root."""
    if source.startswith(("http://", "https://")):
        return source
    path = Path(source)
    if path.is_absolute() or path.exists():
        return str(path)
    candidate = REPO_ROOT / path
    return str(candidate) if candidate.exists() else str(path)


def run_stage(stage: Callable[[], int]) -> int:
    """Run a command body and map pipeline failures onto exit codes."""
    try:
        return stage()
    except Exception as exc:
        code = exit_code_for(exc)
        logging.getLogger("pipeline").error("%s: %s", type(exc).__name__, exc)
        print(f"Failed: {exc}")
        return code


def with_cli_overrides(
    config: PipelineConfig,
    seed: int | None = None,
    workers: int | None = None,
    **sections: dict[str, Any],
) -> PipelineConfig:
    """Apply flag values, then PFDIFF_* environment values, over the config document."""
    seed = env_int("SEED", seed)
    workers = env_int("WORKERS", workers)
    return config.with_overrides(
        seed=config.seed if seed is None else seed,
        workers=config.workers if workers is None else workers,
        **sections,
    )
