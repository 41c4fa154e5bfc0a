"""Denoising training loop: v-target regression with optional block dropout.

The per-batch loss draws t ~ U[0, 1] and eps ~ N(0, I) per sample, forms
z_t = alpha_t x + sigma_t eps, and regresses the chosen target with an
elementwise mean-squared error.  A fraction of conditions is replaced by the
null token so the unconditional branch used by guidance gets trained too.

Robust training samples a fresh execute-or-skip mask per batch, which
prepares the network for the architecture edits applied later.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Optional

import torch

from .nets import ConditionalDenoiser, SkipConfig
from .schedule import CosineSchedule, PredictionKind, convert, diffuse, v_from_x_eps


class TrainingDiverged(RuntimeError):
    """Loss blew past the divergence guard; the partial log is attached."""

    def __init__(self, message: str, metrics: list[dict]):
        super().__init__(message)
        self.metrics = metrics


@dataclasses.dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    parameterization: PredictionKind = PredictionKind.V
    uncond_probability: float = 0.1
    skip: Optional[SkipConfig] = None
    seed: int = 0
    log_every: int = 50
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.uncond_probability <= 1.0:
            raise ValueError("uncond_probability must be in [0, 1]")


def denoise_loss(
    model,
    batch: tuple[torch.Tensor, torch.Tensor],
    schedule: CosineSchedule,
    parameterization: PredictionKind = PredictionKind.V,
    generator: Optional[torch.Generator] = None,
    mask=None,
    uncond_probability: float = 0.0,
    null_condition: Optional[int] = None,
) -> torch.Tensor:
    """One-batch denoising loss in the requested parameterization."""
    x, c = batch
    g = generator if generator is not None else torch.Generator().manual_seed(0)
    t = torch.rand(x.shape[0], generator=g, dtype=torch.float64)
    eps = torch.randn(x.shape, generator=g, dtype=x.dtype)
    if uncond_probability > 0.0:
        if null_condition is None:
            null_condition = getattr(model, "null_condition")
        drop = torch.rand(x.shape[0], generator=g) < uncond_probability
        c = torch.where(drop, torch.full_like(c, null_condition), c)
    state = diffuse(schedule, x, eps, t)
    kwargs = {} if mask is None else {"mask": mask}
    pred = model(state.z, t.to(x.dtype), c, **kwargs)
    if not torch.isfinite(pred.value).all():
        raise RuntimeError("non-finite model output in denoise_loss")
    if parameterization is PredictionKind.V:
        target = v_from_x_eps(schedule, x, eps, t).value
        out = convert(schedule, pred, state, PredictionKind.V).value
    elif parameterization is PredictionKind.EPSILON:
        target = eps
        out = convert(schedule, pred, state, PredictionKind.EPSILON).value
    else:
        target = x
        out = convert(schedule, pred, state, PredictionKind.X).value
    return torch.nn.functional.mse_loss(out, target)


def fit(
    model: ConditionalDenoiser,
    dataset,
    config: TrainConfig,
    schedule: CosineSchedule,
) -> tuple[ConditionalDenoiser, list[dict]]:
    """Train in place with AdamW; returns the model and the metric log.

    Deterministic given (config.seed, dataset, initial weights): every random
    draw comes from one seeded generator.
    """
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    metrics: list[dict] = []
    start = time.perf_counter()
    initial_loss = None
    for step in range(config.steps):
        x, c = dataset.sample_batch(config.batch_size, g)
        mask = None
        if config.skip is not None:
            mask = config.skip.sample_mask(model.genome, g)
        try:
            loss = denoise_loss(
                model,
                (x, c),
                schedule,
                parameterization=config.parameterization,
                generator=g,
                mask=mask,
                uncond_probability=config.uncond_probability,
            )
        except RuntimeError as err:
            raise TrainingDiverged(
                f"non-finite forward at step {step}: {err}", metrics
            ) from err
        value = float(loss.detach())
        if initial_loss is None:
            initial_loss = max(value, 1e-12)
        if not torch.isfinite(loss.detach()) or value > config.divergence_factor * initial_loss:
            raise TrainingDiverged(
                f"loss {value:g} exceeded {config.divergence_factor:g} x initial "
                f"{initial_loss:g} at step {step}",
                metrics,
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            metrics.append(
                {"step": step, "loss": value, "wallclock": time.perf_counter() - start}
            )
    return model, metrics
