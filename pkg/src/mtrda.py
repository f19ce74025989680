"""Trend-residual diffusion augmentation of MAP histories.

Histories are split into a multi-scale moving-average trend and a residual. A small denoiser
learns to recover clean residuals from noised ones (x0 parameterisation); new residuals are
sampled by ancestral reverse diffusion and added back onto the original trend.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from cohort import ForecastInstance
from configuration import MtrdaConfig

logger = logging.getLogger(__name__)

DENOISER_FORMAT_VERSION = 1


class DenoiserDivergedError(Exception):
    """Denoiser training produced a non-finite loss."""


@dataclass(frozen=True)
class ScaleSet:
    windows: tuple[int, ...]

    def __post_init__(self):
        if not self.windows:
            raise ValueError("scale set must not be empty")
        if any(w < 1 or w % 2 == 0 for w in self.windows):
            raise ValueError(f"scale windows must be odd and >= 1, got {self.windows}")
        if any(b <= a for a, b in zip(self.windows, self.windows[1:])):
            raise ValueError(f"scale windows must be strictly increasing, got {self.windows}")


@dataclass(frozen=True)
class TrendResidual:
    trend: np.ndarray
    residual: np.ndarray


def smooth_scale(x: Sequence[float], window: int) -> np.ndarray:
    """Centered moving average with mirror padding of ``window // 2`` samples at both ends."""
    x = np.asarray(x, dtype=np.float64)
    if window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    if not 1 <= window <= 2 * len(x) - 1:
        raise ValueError(f"window {window} is outside [1, {2 * len(x) - 1}] for a series of length {len(x)}")
    padded = np.pad(x, window // 2, mode="symmetric")
    return sliding_window_view(padded, window).mean(axis=-1)


def decompose(x: Sequence[float], scales: ScaleSet) -> TrendResidual:
    x = np.asarray(x, dtype=np.float64)
    trend = np.mean([smooth_scale(x, w) for w in scales.windows], axis=0)
    return TrendResidual(trend=trend, residual=x - trend)


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", np.concatenate(([1.0], np.cumprod(1.0 - betas))))

    @property
    def steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, k: int) -> float:
        """Cumulative product up to step ``k``; step 0 is the clean signal."""
        if not 0 <= k <= self.steps:
            raise ValueError(f"step {k} is outside [0, {self.steps}]")
        return float(self.alpha_bars[k])


def make_schedule(steps: int, beta_start: float, beta_end: float, shape: str = "cosine") -> DiffusionSchedule:
    """Noise schedule with its first and last beta pinned to ``beta_start`` and ``beta_end``.

    The cosine shape follows the squared-cosine cumulative curve (offset 0.008); its betas are
    rescaled linearly onto the requested endpoints.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if steps == 1:
        return DiffusionSchedule(np.array([beta_start]))
    if shape == "linear":
        betas = np.linspace(beta_start, beta_end, steps)
    elif shape == "cosine":
        offset = 0.008
        u = np.arange(steps + 1) / steps
        curve = np.cos((u + offset) / (1 + offset) * math.pi / 2) ** 2
        raw = np.clip(1.0 - curve[1:] / curve[:-1], 0.0, 0.999)
        span = raw[-1] - raw[0]
        if span <= 0:
            betas = np.full(steps, beta_start)
        else:
            betas = beta_start + (raw - raw[0]) / span * (beta_end - beta_start)
        betas[0], betas[-1] = beta_start, beta_end
    else:
        raise ValueError(f"unknown schedule shape '{shape}'")
    return DiffusionSchedule(betas)


def diffuse_forward(residual: np.ndarray, k: int, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    residual = np.asarray(residual, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != residual.shape:
        raise ValueError(f"noise shape {noise.shape} does not match residual shape {residual.shape}")
    alpha_bar = schedule.alpha_bar(k)
    return math.sqrt(alpha_bar) * residual + math.sqrt(1.0 - alpha_bar) * noise


class SinusoidalStepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=k.device) / max(half - 1, 1))
        angles = k.to(freqs.dtype)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        if self.dim % 2:
            emb = nn.functional.pad(emb, (0, 1))
        return emb


class AdaLNBlock(nn.Module):
    """Step-modulated layer norm followed by a temporal linear mix and a channel MLP."""

    def __init__(self, length: int, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.modulation = nn.Linear(width, 2 * width)
        self.temporal = nn.Linear(length, length)
        self.channel = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.modulation(cond).unsqueeze(1).chunk(2, dim=-1)
        z = self.norm(h) * (1 + scale) + shift
        z = self.temporal(z.transpose(1, 2)).transpose(1, 2)
        return h + self.channel(z)


class ResidualDenoiser(nn.Module):
    def __init__(self, length: int, width: int = 128, blocks: int = 3, condition_on_trend: bool = False):
        super().__init__()
        self.length = length
        self.condition_on_trend = condition_on_trend
        self.input_projection = nn.Linear(2 if condition_on_trend else 1, width)
        self.position = nn.Parameter(torch.randn(length, width) * 0.02)
        self.step_embedding = SinusoidalStepEmbedding(width)
        self.step_projection = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.blocks = nn.ModuleList(AdaLNBlock(length, width) for _ in range(blocks))
        self.output_projection = nn.Linear(width, 1)

    def forward(self, x_k: torch.Tensor, k: torch.Tensor, trend: torch.Tensor | None = None) -> torch.Tensor:
        if x_k.shape[-1] != self.length:
            raise ValueError(f"denoiser expects length {self.length}, got {x_k.shape[-1]}")
        channels = [x_k]
        if self.condition_on_trend:
            if trend is None:
                raise ValueError("trend-conditioned denoiser needs the trend input")
            channels.append(trend)
        h = self.input_projection(torch.stack(channels, dim=-1)) + self.position
        cond = self.step_projection(self.step_embedding(k).to(x_k.dtype))
        for block in self.blocks:
            h = block(h, cond)
        return self.output_projection(h).squeeze(-1)


def denoiser_forward(x_k: np.ndarray, k: int, model: ResidualDenoiser, trend: np.ndarray | None = None) -> np.ndarray:
    """Single-series convenience wrapper returning the x0 estimate."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(x_k), dtype=dtype).unsqueeze(0)
        steps = torch.full((1,), k, dtype=torch.long)
        tr = None if trend is None else torch.as_tensor(np.asarray(trend), dtype=dtype).unsqueeze(0)
        return model(x, steps, tr).squeeze(0).numpy()


@dataclass
class DenoiserFit:
    model: ResidualDenoiser
    schedule: DiffusionSchedule
    scales: ScaleSet
    residual_scale: float
    loss_history: list[float]


def train_denoiser(
    residuals: np.ndarray,
    schedule: DiffusionSchedule,
    config: MtrdaConfig,
    seed: int,
    trends: np.ndarray | None = None,
) -> DenoiserFit:
    """Fit the x0 denoiser with Adam on uniformly drawn diffusion steps."""
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.ndim != 2 or len(residuals) == 0:
        raise ValueError("train_denoiser needs a non-empty (n_series, length) residual array")
    if config.condition_on_trend and trends is None:
        raise ValueError("condition_on_trend requires the matching trends")

    residual_scale = float(residuals.std()) if config.standardize else 1.0
    if residual_scale <= 0:
        residual_scale = 1.0

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    model = ResidualDenoiser(residuals.shape[1], config.width, config.blocks, config.condition_on_trend)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    data = torch.as_tensor(residuals / residual_scale, dtype=torch.float32)
    trend_data = None if trends is None else torch.as_tensor(np.asarray(trends), dtype=torch.float32)
    alpha_bars = torch.as_tensor(schedule.alpha_bars, dtype=torch.float32)

    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(len(data), generator=generator)
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(data), config.batch_size):
            idx = order[start : start + config.batch_size]
            x0 = data[idx]
            k = torch.randint(1, schedule.steps + 1, (len(idx),), generator=generator)
            noise = torch.randn(x0.shape, generator=generator)
            ab = alpha_bars[k].unsqueeze(-1)
            x_k = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
            trend = None if trend_data is None else trend_data[idx]
            loss = nn.functional.mse_loss(model(x_k, k, trend), x0)
            if not torch.isfinite(loss):
                raise DenoiserDivergedError(f"denoiser loss became {loss.item()} at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            batches += 1
        history.append(epoch_loss / batches)
        logger.debug(f"Denoiser epoch {epoch + 1}/{config.epochs}: loss {history[-1]:.6f}")

    logger.info(f"Denoiser trained on {len(data)} residuals: loss {history[0]:.5f} -> {history[-1]:.5f}")
    return DenoiserFit(model, schedule, ScaleSet(tuple(config.scales)), residual_scale, history)


def sample_augmented(
    trend: np.ndarray, fit: DenoiserFit, count: int, seed: int, single_shot: bool = False
) -> list[np.ndarray]:
    """Draw ``count`` histories: reverse-diffuse fresh residuals and add them onto ``trend``."""
    if count == 0:
        return []
    trend = np.asarray(trend, dtype=np.float64)
    schedule, model = fit.schedule, fit.model
    dtype = next(model.parameters()).dtype
    generator = torch.Generator().manual_seed(seed)
    trend_batch = None
    if model.condition_on_trend:
        trend_batch = torch.as_tensor(trend, dtype=dtype).expand(count, -1)

    model.eval()
    with torch.no_grad():
        x = torch.randn((count, len(trend)), generator=generator, dtype=dtype)
        if single_shot:
            x = model(x, torch.full((count,), schedule.steps, dtype=torch.long), trend_batch)
        else:
            for k in range(schedule.steps, 0, -1):
                x0_hat = model(x, torch.full((count,), k, dtype=torch.long), trend_batch)
                if k == 1:
                    x = x0_hat
                    break
                beta = schedule.betas[k - 1]
                ab, ab_prev = schedule.alpha_bars[k], schedule.alpha_bars[k - 1]
                mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0_hat + (
                    math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)
                ) * x
                variance = beta * (1 - ab_prev) / (1 - ab)
                x = mean + math.sqrt(variance) * torch.randn(x.shape, generator=generator, dtype=dtype)
    residuals = x.double().numpy() * fit.residual_scale
    return [trend + r for r in residuals]


@dataclass(eq=False)
class AugmentedInstance:
    base_id: str
    variants: list[np.ndarray]
    target: np.ndarray


def _instance_seed(seed: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def augment_instances(
    instances: list[ForecastInstance], fit: DenoiserFit, config: MtrdaConfig, seed: int
) -> dict[str, AugmentedInstance]:
    augmented = {}
    for position, instance in enumerate(instances):
        if config.positives_only and not instance.label:
            continue
        parts = decompose(instance.history, fit.scales)
        variants = sample_augmented(
            parts.trend, fit, config.augment_count, _instance_seed(seed, position), config.single_shot
        )
        augmented[instance.instance_id] = AugmentedInstance(instance.instance_id, variants, instance.target)
    logger.info(f"Augmented {len(augmented)} instance(s) with {config.augment_count} variant(s) each")
    return augmented


def assemble_x2(x1: list[ForecastInstance], augmentations: dict[str, AugmentedInstance]) -> list[ForecastInstance]:
    """Original instances followed by one instance per augmented history, sharing the base target."""
    by_id = {instance.instance_id: instance for instance in x1}
    dangling = sorted(set(augmentations) - set(by_id))
    if dangling:
        raise ValueError(f"augmentations reference unknown instance(s): {', '.join(dangling[:5])}")
    x2 = list(x1)
    for base_id, augmentation in augmentations.items():
        base = by_id[base_id]
        for j, variant in enumerate(augmentation.variants):
            x2.append(
                ForecastInstance(
                    patient_id=base.patient_id,
                    anchor_index=base.anchor_index,
                    history=variant,
                    target=base.target,
                    label=base.label,
                    sampling_interval_s=base.sampling_interval_s,
                    ioh_mask=base.ioh_mask,
                    description_ref=base.description_ref,
                    source=f"aug{j}",
                )
            )
    return x2


def fit_from_instances(instances: list[ForecastInstance], config: MtrdaConfig, seed: int) -> DenoiserFit:
    scales = ScaleSet(tuple(config.scales))
    parts = [decompose(instance.history, scales) for instance in instances]
    schedule = make_schedule(config.steps, config.beta_start, config.beta_end, config.schedule)
    return train_denoiser(
        np.stack([p.residual for p in parts]),
        schedule,
        config,
        seed,
        trends=np.stack([p.trend for p in parts]) if config.condition_on_trend else None,
    )


def save_denoiser(path: str | Path, fit: DenoiserFit, config: MtrdaConfig) -> None:
    torch.save(
        {
            "format_version": DENOISER_FORMAT_VERSION,
            "length": fit.model.length,
            "mtrda_config": config.model_dump(mode="json"),
            "betas": fit.schedule.betas.tolist(),
            "residual_scale": fit.residual_scale,
            "loss_history": fit.loss_history,
            "model_state": fit.model.state_dict(),
        },
        path,
    )


def load_denoiser(path: str | Path) -> DenoiserFit:
    payload = torch.load(path, weights_only=True)
    if payload.get("format_version") != DENOISER_FORMAT_VERSION:
        raise ValueError(f"unsupported denoiser checkpoint version {payload.get('format_version')}")
    config = MtrdaConfig.model_validate(payload["mtrda_config"])
    model = ResidualDenoiser(payload["length"], config.width, config.blocks, config.condition_on_trend)
    model.load_state_dict(payload["model_state"])
    return DenoiserFit(
        model=model,
        schedule=DiffusionSchedule(np.asarray(payload["betas"])),
        scales=ScaleSet(tuple(config.scales)),
        residual_scale=float(payload["residual_scale"]),
        loss_history=list(payload["loss_history"]),
    )
