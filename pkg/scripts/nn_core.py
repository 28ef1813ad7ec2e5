from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from pipeline_utils import VERSION, DdpmConfig, NonFiniteLossError, ScheduleConfig


PREDICTION_MODES = ("epsilon", "x0")


def time_embedding(t: torch.Tensor, width: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of integer steps ``t`` at geometric frequencies, shape (len(t), width)."""
    if width < 2 or width % 2:
        raise ValueError("time embedding width must be even and >= 2.")
    half = width // 2
    exponent = torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    frequencies = torch.exp(-math.log(max_period) * exponent)
    angles = t.to(torch.float64).reshape(-1, 1) * frequencies.reshape(1, -1)
    return torch.cat((torch.sin(angles), torch.cos(angles)), dim=1)


class BottleneckAttention(nn.Module):
    """Self-attention over a token view of the bottleneck vector, added back as a residual."""

    def __init__(self, width: int, tokens: int, heads: int) -> None:
        super().__init__()
        if width % tokens or (width // tokens) % heads:
            raise ValueError(f"width {width} does not split into {tokens} tokens with {heads} heads.")
        self.tokens = tokens
        self.attention = nn.MultiheadAttention(width // tokens, heads, batch_first=True)
        self.norm = nn.LayerNorm(width)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        tokens = self.norm(h).reshape(h.shape[0], self.tokens, -1)
        attended, _ = self.attention(tokens, tokens, tokens, need_weights=False)
        return h + attended.reshape(h.shape[0], -1)


class Denoiser(nn.Module):
    """Fully connected encoder-decoder over flat samples.

    Down-path activations are concatenated into the up-path layer of the same width, every hidden
    layer receives its own projection of the step embedding, and the output layer starts at zero.
    """

    def __init__(
        self,
        dimension: int,
        steps: int,
        hidden_widths: Sequence[int] = (256, 128, 64, 32, 64, 128, 256),
        time_embedding_width: int = 64,
        attention: bool = True,
        attention_tokens: int = 4,
        attention_heads: int = 1,
        prediction: str = "epsilon",
    ) -> None:
        super().__init__()
        widths = list(hidden_widths)
        if len(widths) % 2 != 1:
            raise ValueError("hidden widths need an odd count around one bottleneck layer.")
        if prediction not in PREDICTION_MODES:
            raise ValueError(f"prediction must be one of {list(PREDICTION_MODES)}.")
        half = len(widths) // 2
        if widths[:half] != widths[half + 1 :][::-1]:
            raise ValueError("hidden widths must be symmetric around the bottleneck.")
        self.dimension = dimension
        self.steps = steps
        self.time_embedding_width = time_embedding_width
        self.prediction = prediction

        self.down = nn.ModuleList()
        previous = dimension
        for width in widths[:half]:
            self.down.append(nn.Linear(previous, width))
            previous = width
        self.middle = nn.Linear(previous, widths[half])
        previous = widths[half]
        self.up = nn.ModuleList()
        for position, width in enumerate(widths[half + 1 :]):
            skip = widths[half - 1 - position]
            self.up.append(nn.Linear(previous + skip, width))
            previous = width
        self.time_projections = nn.ModuleList(nn.Linear(time_embedding_width, width) for width in widths)
        self.attention = BottleneckAttention(widths[half], attention_tokens, attention_heads) if attention else None
        self.out = nn.Linear(previous, dimension)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.activation = nn.SiLU()

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dimension:
            raise ValueError(f"Denoiser expects {self.dimension} dimensions, got {x.shape[-1]}.")
        embedding = time_embedding(t, self.time_embedding_width).to(x.dtype)
        projections = iter(self.time_projections)
        h = x
        skips: list[torch.Tensor] = []
        for layer in self.down:
            h = self.activation(layer(h) + next(projections)(embedding))
            skips.append(h)
        h = self.activation(self.middle(h) + next(projections)(embedding))
        if self.attention is not None:
            h = self.attention(h)
        for layer in self.up:
            h = self.activation(layer(torch.cat((h, skips.pop()), dim=-1)) + next(projections)(embedding))
        output = self.out(h)
        if self.prediction == "x0":
            return torch.sigmoid(output)
        return output


class ScheduleNet(nn.Module):
    """Maps a normalized sample to logits whose cumulative sigmoid product is a decreasing alpha-bar."""

    def __init__(self, dimension: int, steps: int, hidden_widths: Sequence[int] = (512, 256)) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        previous = dimension
        for width in hidden_widths:
            layers.extend([nn.Linear(previous, width), nn.ReLU()])
            previous = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(previous, steps)
        self.dimension = dimension
        self.steps = steps

    def initialize_towards(self, alpha_bar: np.ndarray, weight_scale: float = 1e-3) -> None:
        """Start near a reference schedule: head bias = logit of its per-step alphas, small head weights."""
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.shape != (self.steps,):
            raise ValueError(f"reference schedule must have {self.steps} entries.")
        alphas = alpha_bar / np.concatenate(([1.0], alpha_bar[:-1]))
        alphas = np.clip(alphas, 1e-6, 1.0 - 1e-9)
        with torch.no_grad():
            self.head.bias.copy_(torch.as_tensor(np.log(alphas / (1.0 - alphas)), dtype=self.head.bias.dtype))
            self.head.weight.mul_(weight_scale)

    def logits(self, x0: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x0))

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        return torch.cumprod(torch.sigmoid(self.logits(x0)), dim=-1)


def schedule_forward(net: ScheduleNet, x0: torch.Tensor) -> torch.Tensor:
    return net(x0)


def denoiser_forward(model: Denoiser, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    if torch.any(t < 1) or torch.any(t > model.steps):
        raise ValueError(f"step index must be in [1, {model.steps}].")
    return model(x_t, t)


def count_parameters(module: nn.Module) -> int:
    return sum(parameter.numel() for parameter in module.parameters() if parameter.requires_grad)


def denoiser_architecture(config: DdpmConfig, dimension: int, steps: int) -> dict[str, Any]:
    return {
        "dimension": dimension,
        "steps": steps,
        "hiddenWidths": list(config.hidden_widths),
        "timeEmbeddingWidth": config.time_embedding_width,
        "attention": config.attention,
        "attentionTokens": config.attention_tokens,
        "attentionHeads": config.attention_heads,
        "prediction": config.prediction,
    }


def denoiser_from_architecture(architecture: dict[str, Any]) -> Denoiser:
    return Denoiser(
        dimension=int(architecture["dimension"]),
        steps=int(architecture["steps"]),
        hidden_widths=tuple(int(width) for width in architecture["hiddenWidths"]),
        time_embedding_width=int(architecture["timeEmbeddingWidth"]),
        attention=bool(architecture["attention"]),
        attention_tokens=int(architecture["attentionTokens"]),
        attention_heads=int(architecture["attentionHeads"]),
        prediction=str(architecture["prediction"]),
    )


def build_denoiser(config: DdpmConfig, dimension: int, steps: int) -> Denoiser:
    model = denoiser_from_architecture(denoiser_architecture(config, dimension, steps))
    if config.expected_parameters is not None and count_parameters(model) != config.expected_parameters:
        raise ValueError(
            f"ddpm.expectedParameters: model has {count_parameters(model)} parameters, "
            f"config expects {config.expected_parameters}."
        )
    return model


def build_schedule_net(config: ScheduleConfig, dimension: int) -> ScheduleNet:
    return ScheduleNet(dimension, config.steps, config.hidden_widths)


def make_optimizer(module: nn.Module, learning_rate: float, betas: tuple[float, float] = (0.9, 0.999)) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=learning_rate, betas=betas)


def optimizer_step(optimizer: torch.optim.Optimizer, module: nn.Module, step: int | None = None) -> None:
    """Apply one Adam update after checking every gradient is finite."""
    for name, parameter in module.named_parameters():
        if parameter.grad is not None and not torch.all(torch.isfinite(parameter.grad)):
            raise NonFiniteLossError(f"non-finite gradient in '{name}'", step=step)
    optimizer.step()


def capture_rng_state(generator: torch.Generator) -> dict[str, Any]:
    return {"generator": generator.get_state(), "torch": torch.get_rng_state()}


def restore_rng_state(state: dict[str, Any], generator: torch.Generator) -> None:
    if "generator" in state:
        generator.set_state(state["generator"])
    if "torch" in state:
        torch.set_rng_state(state["torch"])


def save_checkpoint(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": VERSION, **payload}, path)


def load_checkpoint(path: Path) -> dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version.")
    for key in ("architecture", "stateDict", "schedule"):
        if key not in payload:
            raise ValueError(f"{path}: checkpoint is missing '{key}'.")
    return payload
