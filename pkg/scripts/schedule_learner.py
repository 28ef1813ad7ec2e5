from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Any, Callable

import numpy as np
import torch

from diffusion import (
    BoundsTensors,
    ImbalanceBound,
    NoiseSchedule,
    bounds_tensors,
    linear_beta_schedule,
    schedule_from_alpha_bar,
)
from grid_model import GridTensors, NormalizationBounds, denormalize
from nn_core import ScheduleNet, build_schedule_net, make_optimizer, optimizer_step
from pf_engine import TorchGrid, residual_imbalance, residual_imbalance_torch, torch_grid
from pipeline_utils import NonFiniteLossError, PipelineConfig, ScheduleConfig, stream_rng, stream_seed


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleTrainingResult:
    schedule: NoiseSchedule
    baseline: NoiseSchedule
    bound: ImbalanceBound
    log: list[dict[str, Any]]
    net: ScheduleNet


def noise_imbalance(
    grid: GridTensors,
    bounds: NormalizationBounds,
    draws: int,
    rng: np.random.Generator,
    batch_size: int = 1000,
) -> float:
    """Monte Carlo mean imbalance of standard-normal vectors mapped through the denormalization."""
    if draws < 1:
        raise ValueError("draws must be >= 1.")
    total = 0.0
    for start in range(0, draws, batch_size):
        size = min(batch_size, draws - start)
        noise = rng.standard_normal((size, bounds.dimension))
        total += float(np.sum(residual_imbalance(denormalize(noise, bounds), grid).mean))
    return total / draws


def baseline_schedule(config: ScheduleConfig) -> NoiseSchedule:
    return linear_beta_schedule(config.steps, config.beta_start, config.beta_end)


def resolve_gamma_terminal(config: PipelineConfig, grid: GridTensors, bounds: NormalizationBounds) -> float:
    if config.schedule.gamma_terminal is not None:
        return float(config.schedule.gamma_terminal)
    gamma = noise_imbalance(grid, bounds, config.schedule.gamma_draws, stream_rng(config.seed, "schedule", 0))
    logger.info("Measured terminal noise imbalance %.4f p.u. over %d draws.", gamma, config.schedule.gamma_draws)
    return gamma


def forward_imbalance(
    alpha_bar: torch.Tensor,
    x0: torch.Tensor,
    eps: torch.Tensor,
    grid: TorchGrid,
    bounds: BoundsTensors,
) -> torch.Tensor:
    """R of the noised sample for every (row, t); eps is (B, D) shared over t or (B, T, D)."""
    if eps.dim() == 2:
        eps = eps.unsqueeze(1)
    scale = alpha_bar.unsqueeze(-1)
    x_t = torch.sqrt(scale) * x0.unsqueeze(1) + torch.sqrt(1.0 - scale) * eps
    return residual_imbalance_torch(bounds.denormalize(x_t), grid)


def aux_loss(
    net: Callable[[torch.Tensor], torch.Tensor],
    x0: torch.Tensor,
    eps: torch.Tensor,
    bound: ImbalanceBound,
    grid: TorchGrid,
    bounds: BoundsTensors,
) -> torch.Tensor:
    """Batch mean of sum_t (R(x_t) - gamma_t)^2 under the schedule emitted by ``net``."""
    alpha_bar = net(x0)
    residual = forward_imbalance(alpha_bar, x0, eps, grid, bounds)
    gamma = torch.as_tensor(bound.values()[1:], dtype=residual.dtype)
    return ((residual - gamma) ** 2).sum(dim=-1).mean()


def export_mean_alpha_bar(net: ScheduleNet, data: torch.Tensor, batch_size: int) -> np.ndarray:
    total = torch.zeros(net.steps, dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, data.shape[0], batch_size):
            total += net(data[start : start + batch_size]).to(torch.float64).sum(dim=0)
    return (total / data.shape[0]).numpy()


def train_schedule(
    data: np.ndarray,
    grid: GridTensors,
    bounds: NormalizationBounds,
    config: PipelineConfig,
    gamma_terminal: float,
    epochs: int | None = None,
) -> ScheduleTrainingResult:
    """Fit the schedule network so the forward imbalance follows the linear bound, then export its dataset mean."""
    settings = config.schedule
    data_t = torch.as_tensor(np.asarray(data, dtype=np.float64))
    if data_t.dim() != 2 or data_t.shape[1] != bounds.dimension:
        raise ValueError(f"schedule training data must be n x {bounds.dimension}.")
    n, dimension = data_t.shape
    bound = ImbalanceBound(steps=settings.steps, gamma_terminal=gamma_terminal)
    baseline = baseline_schedule(settings)
    grid_t = torch_grid(grid, torch.float64)
    bounds_t = bounds_tensors(bounds, torch.float64)

    seed = stream_seed(config.seed, "schedule")
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    net = build_schedule_net(settings, dimension).double()
    net.initialize_towards(baseline.alpha_bar)
    optimizer = make_optimizer(net, settings.learning_rate)

    log: list[dict[str, Any]] = []
    history: list[float] = []
    batch_size = min(settings.batch_size, n)
    for epoch in range(1, (epochs or settings.epochs) + 1):
        order = torch.randperm(n, generator=generator)
        shared_eps = None if settings.noise_per_step else torch.randn((n, dimension), generator=generator, dtype=torch.float64)
        running = 0.0
        for start in range(0, n, batch_size):
            index = order[start : start + batch_size]
            x0 = data_t[index]
            if shared_eps is None:
                eps = torch.randn((index.shape[0], settings.steps, dimension), generator=generator, dtype=torch.float64)
            else:
                eps = shared_eps[index]
            loss = aux_loss(net, x0, eps, bound, grid_t, bounds_t)
            if not torch.isfinite(loss):
                raise NonFiniteLossError("non-finite schedule loss", step=epoch, components={"loss": float(loss.detach())})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer_step(optimizer, net, epoch)
            running += float(loss.detach()) * index.shape[0]
        epoch_loss = running / n
        history.append(epoch_loss)
        relative = None
        if len(history) > settings.patience:
            reference = history[-1 - settings.patience]
            relative = (reference - epoch_loss) / abs(reference) if reference else 0.0
        log.append({"epoch": epoch, "loss": epoch_loss, "relativeImprovement": relative})
        logger.info("epoch %d: aux loss %.6f", epoch, epoch_loss)
        if relative is not None and relative < settings.min_relative_improvement:
            logger.info("Stopping: relative improvement %.2e over %d epochs.", relative, settings.patience)
            break

    net.eval()
    alpha_bar = export_mean_alpha_bar(net, data_t, batch_size)
    schedule = schedule_from_alpha_bar(alpha_bar, provenance="learned")
    if schedule.alpha_bar[-1] > 1e-2:
        logger.warning("Learned terminal alpha-bar %.3e is above 1e-2.", schedule.alpha_bar[-1])
    return ScheduleTrainingResult(schedule=schedule, baseline=baseline, bound=bound, log=log, net=net)


def forward_imbalance_curve(
    data: np.ndarray,
    schedule: NoiseSchedule,
    grid: GridTensors,
    bounds: NormalizationBounds,
    draws: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mean R(x_t) for t = 0..T over the given normalized samples and ``draws`` noise draws per step."""
    if draws < 1:
        raise ValueError("draws must be >= 1.")
    data = np.asarray(data, dtype=np.float64)
    curve = np.zeros(schedule.steps + 1)
    curve[0] = float(np.mean(residual_imbalance(denormalize(data, bounds), grid).mean))
    alpha_bar = schedule.alpha_bar
    for t in range(1, schedule.steps + 1):
        total = 0.0
        for _ in range(draws):
            noise = rng.standard_normal(data.shape)
            x_t = np.sqrt(alpha_bar[t - 1]) * data + np.sqrt(1.0 - alpha_bar[t - 1]) * noise
            total += float(np.mean(residual_imbalance(denormalize(x_t, bounds), grid).mean))
        curve[t] = total / draws
    return curve
