from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Any

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from grid_model import NormalizationBounds
from nn_core import Denoiser, optimizer_step
from pf_engine import TorchGrid, residual_imbalance_torch
from pipeline_utils import VERSION, DdpmConfig, NonFiniteLossError, ScheduleValidationError, utc_now_iso


logger = logging.getLogger(__name__)

PROVENANCES = ("linear", "learned", "manual")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas for t = 1..T; alphas, cumulative alpha-bar and sigma are derived."""

    betas: np.ndarray
    provenance: str = "linear"

    @property
    def steps(self) -> int:
        return int(self.betas.shape[0])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.betas)

    def at(self, t: int) -> tuple[float, float, float]:
        """(beta_t, alpha_t, alpha_bar_t) for 1 <= t <= T."""
        if t < 1 or t > self.steps:
            raise ValueError(f"step {t} outside [1, {self.steps}].")
        return float(self.betas[t - 1]), float(self.alphas[t - 1]), float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class ImbalanceBound:
    steps: int
    gamma_terminal: float

    def gamma(self, t: int | np.ndarray | torch.Tensor) -> Any:
        return gamma_bound(t, self.steps, self.gamma_terminal)

    def values(self) -> np.ndarray:
        """gamma_t for t = 0..T."""
        return np.arange(self.steps + 1) * self.gamma_terminal / self.steps


@dataclass(frozen=True)
class TrainingLosses:
    ddpm: float
    physics: float
    total: float


@dataclass(frozen=True)
class SampleResult:
    samples: np.ndarray
    unit: np.ndarray
    trace: np.ndarray


def validate_schedule(
    schedule: NoiseSchedule,
    first_min: float | None = None,
    terminal_max: float | None = None,
) -> NoiseSchedule:
    betas = schedule.betas
    for index, beta in enumerate(betas, start=1):
        if not (0.0 < beta < 1.0) or not math.isfinite(beta):
            raise ScheduleValidationError(f"beta {beta!r} outside (0, 1)", index)
    alpha_bar = schedule.alpha_bar
    drops = np.flatnonzero(np.diff(alpha_bar) >= 0.0)
    if drops.size:
        raise ScheduleValidationError("alpha-bar is not strictly decreasing", int(drops[0]) + 2)
    if first_min is not None and alpha_bar[0] < first_min:
        raise ScheduleValidationError(f"alpha-bar {alpha_bar[0]:.6g} below {first_min}", 1)
    if terminal_max is not None and alpha_bar[-1] > terminal_max:
        raise ScheduleValidationError(f"alpha-bar {alpha_bar[-1]:.6g} above {terminal_max}", schedule.steps)
    return schedule


def linear_beta_schedule(steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if steps < 1:
        raise ValueError("steps must be >= 1.")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("linear schedule needs 0 < beta_start <= beta_end < 1.")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return validate_schedule(NoiseSchedule(betas=betas, provenance="linear"))


def schedule_from_alpha_bar(alpha_bar: np.ndarray, provenance: str = "learned") -> NoiseSchedule:
    """Invert the cumulative product: beta_t = 1 - alpha_bar_t / alpha_bar_{t-1} with alpha_bar_0 = 1."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    if alpha_bar.ndim != 1 or alpha_bar.size == 0:
        raise ValueError("alpha-bar must be a non-empty 1-D array.")
    previous = np.concatenate(([1.0], alpha_bar[:-1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        betas = 1.0 - alpha_bar / previous
    return validate_schedule(NoiseSchedule(betas=betas, provenance=provenance))


def gamma_bound(t: Any, steps: int, gamma_terminal: float) -> Any:
    return t * gamma_terminal / steps


def schedule_to_json(
    schedule: NoiseSchedule,
    bound: ImbalanceBound,
    baseline: NoiseSchedule | None = None,
    extra: dict[str, Any] | None = None,
) -> dict[str, Any]:
    if bound.steps != schedule.steps:
        raise ValueError("bound and schedule disagree on the step count.")
    entries = []
    baseline_alpha_bar = baseline.alpha_bar if baseline is not None else None
    for t in range(1, schedule.steps + 1):
        entry = {
            "t": t,
            "beta": float(schedule.betas[t - 1]),
            "alphaBar": float(schedule.alpha_bar[t - 1]),
            "gamma": float(bound.gamma(t)),
        }
        if baseline_alpha_bar is not None:
            entry["baselineAlphaBar"] = float(baseline_alpha_bar[t - 1])
        entries.append(entry)
    return {
        "version": VERSION,
        "generatedAt": utc_now_iso(),
        "provenance": schedule.provenance,
        "steps": schedule.steps,
        "gammaTerminal": bound.gamma_terminal,
        **(extra or {}),
        "entries": entries,
    }


def schedule_from_json(raw: Any) -> tuple[NoiseSchedule, ImbalanceBound]:
    if not isinstance(raw, dict) or raw.get("version") != VERSION:
        raise ValueError("schedule: unsupported payload version.")
    entries = raw.get("entries")
    if not isinstance(entries, list) or not entries:
        raise ValueError("schedule: 'entries' must be a non-empty array.")
    steps = int(raw.get("steps", len(entries)))
    if steps != len(entries) or [entry.get("t") for entry in entries] != list(range(1, steps + 1)):
        raise ValueError("schedule: entries must list t = 1..steps in order.")
    betas = np.array([float(entry["beta"]) for entry in entries], dtype=np.float64)
    provenance = str(raw.get("provenance") or "learned")
    if provenance not in PROVENANCES:
        raise ValueError(f"schedule: unknown provenance '{provenance}'.")
    schedule = validate_schedule(NoiseSchedule(betas=betas, provenance=provenance))
    gamma_terminal = raw.get("gammaTerminal")
    if not isinstance(gamma_terminal, (int, float)) or gamma_terminal <= 0:
        raise ValueError("schedule: 'gammaTerminal' must be a positive number.")
    return schedule, ImbalanceBound(steps=steps, gamma_terminal=float(gamma_terminal))


def _per_step(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    table = torch.as_tensor(values, dtype=like.dtype)
    return table[t.long() - 1].reshape(-1, *([1] * (like.dim() - 1)))


def _as_steps(t: int | torch.Tensor, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.long().reshape(-1)
    return torch.full((batch,), int(t), dtype=torch.long)


def forward_sample(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One-shot noising x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape.")
    steps = _as_steps(t, x0.shape[0] if x0.dim() > 1 else 1)
    alpha_bar = _per_step(schedule.alpha_bar, steps, x0 if x0.dim() > 1 else x0.unsqueeze(0))
    if x0.dim() == 1:
        alpha_bar = alpha_bar.reshape(())
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps


def forward_transition(x_previous: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Single Markov step x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    beta, _, _ = schedule.at(t)
    return math.sqrt(1.0 - beta) * x_previous + math.sqrt(beta) * eps


def physics_hinge(residual: Any, gamma: Any) -> torch.Tensor:
    residual = torch.as_tensor(residual)
    return torch.clamp(residual - torch.as_tensor(gamma, dtype=residual.dtype), min=0.0)


def posterior_mean(x_t: torch.Tensor, t: torch.Tensor, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise-free reverse update (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)."""
    beta = _per_step(schedule.betas, t, x_t)
    alpha = _per_step(schedule.alphas, t, x_t)
    alpha_bar = _per_step(schedule.alpha_bar, t, x_t)
    coefficient = torch.where(beta > 0.0, beta / torch.sqrt(torch.clamp(1.0 - alpha_bar, min=1e-300)), torch.zeros_like(beta))
    return (x_t - coefficient * eps_hat) / torch.sqrt(alpha)


def predicted_noise(output: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule, prediction: str) -> torch.Tensor:
    if prediction == "epsilon":
        return output
    alpha_bar = _per_step(schedule.alpha_bar, t, x_t)
    return (x_t - torch.sqrt(alpha_bar) * output) / torch.sqrt(1.0 - alpha_bar)


def predicted_x0(output: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule, prediction: str) -> torch.Tensor:
    if prediction == "x0":
        return output
    alpha_bar = _per_step(schedule.alpha_bar, t, x_t)
    return (x_t - torch.sqrt(1.0 - alpha_bar) * output) / torch.sqrt(alpha_bar)


@dataclass(frozen=True)
class BoundsTensors:
    lo: torch.Tensor
    span: torch.Tensor

    def denormalize(self, unit: torch.Tensor) -> torch.Tensor:
        return self.lo + unit * self.span


def bounds_tensors(bounds: NormalizationBounds, dtype: torch.dtype = torch.float32) -> BoundsTensors:
    return BoundsTensors(
        lo=torch.tensor(np.array(bounds.lo), dtype=dtype),
        span=torch.tensor(np.array(bounds.span), dtype=dtype),
    )


def physics_loss(
    output: torch.Tensor,
    x_t: torch.Tensor,
    t: torch.Tensor,
    schedule: NoiseSchedule,
    bound: ImbalanceBound,
    grid: TorchGrid,
    bounds: BoundsTensors,
    prediction: str = "epsilon",
    attach: str = "posterior_mean",
) -> torch.Tensor:
    """Batch mean hinge of the imbalance of the model-implied denoised state, without clamping."""
    if attach == "posterior_mean":
        state = posterior_mean(x_t, t, predicted_noise(output, x_t, t, schedule, prediction), schedule)
        gamma = bound.gamma((t - 1).to(x_t.dtype))
    elif attach == "x0":
        state = predicted_x0(output, x_t, t, schedule, prediction)
        gamma = torch.zeros(x_t.shape[0], dtype=x_t.dtype)
    else:
        raise ValueError(f"Unknown physics attach point '{attach}'.")
    residual = residual_imbalance_torch(bounds.denormalize(state), grid)
    return physics_hinge(residual, gamma).mean()


def training_step(
    x0: torch.Tensor,
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    schedule: NoiseSchedule,
    bound: ImbalanceBound,
    grid: TorchGrid,
    bounds: BoundsTensors,
    generator: torch.Generator,
    eta: float = 1.0,
    attach: str = "posterior_mean",
    step: int | None = None,
) -> TrainingLosses:
    """One update on L = L_DDPM + eta * L_R; eta = 0 skips the residual path entirely."""
    model.train()
    batch = x0.shape[0]
    t = torch.randint(1, schedule.steps + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_sample(x0, t, eps, schedule)
    output = model(x_t, t)
    if model.prediction == "x0":
        loss_ddpm = F.mse_loss(output, x0)
    else:
        loss_ddpm = F.mse_loss(output, eps)
    if eta > 0.0:
        loss_physics = physics_loss(output, x_t, t, schedule, bound, grid, bounds, model.prediction, attach)
        loss = loss_ddpm + eta * loss_physics
    else:
        loss_physics = torch.zeros((), dtype=x0.dtype)
        loss = loss_ddpm
    components = {"lossDdpm": float(loss_ddpm.detach()), "lossPhysics": float(loss_physics.detach())}
    if not torch.isfinite(loss):
        logger.error("Non-finite loss at step %s: %s", step, components)
        raise NonFiniteLossError("non-finite training loss", step=step, components=components)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer_step(optimizer, model, step)
    return TrainingLosses(ddpm=components["lossDdpm"], physics=components["lossPhysics"], total=float(loss.detach()))


def train_ddpm(
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    data: torch.Tensor,
    schedule: NoiseSchedule,
    bound: ImbalanceBound,
    grid: TorchGrid,
    bounds: BoundsTensors,
    config: DdpmConfig,
    generator: torch.Generator,
    start_step: int = 0,
    steps: int | None = None,
) -> list[dict[str, Any]]:
    """Run ``steps`` updates after ``start_step``; returns the metrics rows logged every ``logEvery`` steps."""
    if data.dim() != 2 or data.shape[1] != model.dimension:
        raise ValueError(f"training data must be n x {model.dimension}.")
    if model.steps != schedule.steps:
        raise ValueError("model and schedule disagree on the step count.")
    total = config.steps if steps is None else steps
    batch = min(config.batch_size, data.shape[0])
    rows: list[dict[str, Any]] = []
    for step in range(start_step + 1, start_step + total + 1):
        indices = torch.randint(0, data.shape[0], (batch,), generator=generator)
        losses = training_step(
            data[indices],
            model,
            optimizer,
            schedule,
            bound,
            grid,
            bounds,
            generator,
            eta=config.physics_weight,
            attach=config.physics_attach,
            step=step,
        )
        if step % config.log_every == 0 or step == start_step + total:
            rows.append(
                {
                    "step": step,
                    "eta": config.physics_weight,
                    "lossDdpm": losses.ddpm,
                    "lossPhysics": losses.physics,
                    "loss": losses.total,
                }
            )
            logger.info(
                "step %d: L=%.6f L_DDPM=%.6f L_R=%.6f", step, losses.total, losses.ddpm, losses.physics
            )
    return rows


def reverse_update(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    z: torch.Tensor | None = None,
) -> torch.Tensor:
    """x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t z, z = 0 at t = 1."""
    beta, alpha, alpha_bar = schedule.at(t)
    coefficient = beta / math.sqrt(1.0 - alpha_bar) if beta > 0.0 else 0.0
    mean = (x_t - coefficient * eps_hat) / math.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    return mean + math.sqrt(beta) * z


def reverse_step(
    x_t: torch.Tensor,
    t: int,
    model: nn.Module,
    schedule: NoiseSchedule,
    z: torch.Tensor | None = None,
) -> torch.Tensor:
    steps = torch.full((x_t.shape[0],), t, dtype=torch.long)
    output = model(x_t, steps)
    eps_hat = predicted_noise(output, x_t, steps, schedule, getattr(model, "prediction", "epsilon"))
    return reverse_update(x_t, t, eps_hat, schedule, z)


@torch.no_grad()
def sample(
    model: nn.Module,
    schedule: NoiseSchedule,
    n: int,
    generator: torch.Generator,
    grid: TorchGrid,
    bounds: NormalizationBounds,
    batch_size: int | None = None,
) -> SampleResult:
    """Draw ``n`` samples from N(0, I) through the reverse chain; the trace holds mean R at t = 0..T."""
    if n < 1:
        raise ValueError("n must be >= 1.")
    model.eval()
    dimension = bounds.dimension
    dtype = next(model.parameters()).dtype
    torch_bounds = bounds_tensors(bounds, dtype)
    batch_size = batch_size or n
    trace = np.zeros(schedule.steps + 1)
    units: list[np.ndarray] = []
    for start in range(0, n, batch_size):
        size = min(batch_size, n - start)
        x = torch.randn((size, dimension), generator=generator, dtype=dtype)
        trace[schedule.steps] += float(residual_imbalance_torch(torch_bounds.denormalize(x), grid).sum())
        for t in range(schedule.steps, 0, -1):
            z = torch.randn((size, dimension), generator=generator, dtype=dtype) if t > 1 else None
            x = reverse_step(x, t, model, schedule, z)
            if t > 1:
                trace[t - 1] += float(residual_imbalance_torch(torch_bounds.denormalize(x), grid).sum())
        x = torch.clamp(x, 0.0, 1.0)
        trace[0] += float(residual_imbalance_torch(torch_bounds.denormalize(x), grid).sum())
        units.append(x.to(torch.float64).numpy())
    unit = np.concatenate(units, axis=0)
    samples = np.clip(bounds.lo + unit * bounds.span, bounds.lo, bounds.hi)
    return SampleResult(samples=samples, unit=unit, trace=trace / n)
