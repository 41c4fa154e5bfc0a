"""Latent-to-image decoding and decoder compression.

The decoder is a small convolutional upsampler from a (4, 8, 8) latent grid
to a (3, 32, 32) image.  Compression proceeds in two moves: prune the channel
widths by a fixed ratio (a fresh, smaller decoder), then distill the pruned
decoder against the frozen original on latents drawn from the full denoising
pipeline, so the student sees exactly the distribution it will serve.
"""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Iterable, Optional

import torch
from torch import nn

from .evaldata import ConditionalDataset, make_latent_mixture
from .sampler import BayesDenoiser, sample
from .schedule import CosineSchedule, make_schedule


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().to(torch.float64).numpy().tobytes())
    return h.hexdigest()


class ImageDecoder(nn.Module):
    """Three conv stages with x2 upsampling between them: 8 -> 16 -> 32."""

    def __init__(
        self,
        widths: Iterable[int] = (64, 64, 32),
        latent_shape: tuple[int, int, int] = (4, 8, 8),
        out_channels: int = 3,
        seed: int = 0,
    ):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != 3 or any(w < 1 for w in widths):
            raise ValueError(f"widths must be three positive ints, got {widths}")
        self.widths = widths
        self.latent_shape = tuple(latent_shape)
        self.out_channels = out_channels
        self.seed = seed
        c_in = latent_shape[0]
        w0, w1, w2 = widths
        self.conv1 = nn.Conv2d(c_in, w0, 3, padding=1)
        self.conv2 = nn.Conv2d(w0, w1, 3, padding=1)
        self.conv3 = nn.Conv2d(w1, w2, 3, padding=1)
        self.conv_out = nn.Conv2d(w2, out_channels, 3, padding=1)
        self._init_parameters(seed)

    def _init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for _, p in sorted(self.named_parameters()):
            if p.dim() >= 2:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                bound = fan_in**-0.5
                with torch.no_grad():
                    p.uniform_(-bound, bound, generator=g)
            else:
                with torch.no_grad():
                    p.zero_()

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[1:] != self.latent_shape:
            raise ValueError(
                f"expected latents shaped {self.latent_shape}, got {tuple(latents.shape[1:])}"
            )
        h = torch.nn.functional.silu(self.conv1(latents))
        h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.nn.functional.silu(self.conv2(h))
        h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.nn.functional.silu(self.conv3(h))
        return self.conv_out(h)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def checksum(self) -> str:
        return module_checksum(self)


def build_decoder(widths=(64, 64, 32), seed: int = 0) -> ImageDecoder:
    return ImageDecoder(widths=widths, seed=seed)


def prune_decoder(teacher: ImageDecoder, ratio: float = 0.5, seed: int = 1) -> ImageDecoder:
    """A fresh decoder with every channel width scaled by ratio.

    The student starts from its own initialization; distillation, not weight
    slicing, is what transfers the teacher's function.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"prune ratio must be in (0, 1), got {ratio}")
    widths = tuple(int(round(w * ratio)) for w in teacher.widths)
    if any(w < 1 for w in widths):
        raise ValueError(
            f"ratio {ratio} rounds widths {teacher.widths} down to {widths}"
        )
    return ImageDecoder(
        widths=widths,
        latent_shape=teacher.latent_shape,
        out_channels=teacher.out_channels,
        seed=seed,
    )


def parameter_ratio(student: ImageDecoder, teacher: ImageDecoder) -> float:
    return student.parameter_count() / teacher.parameter_count()


# ---------------------------------------------------------------------------
# the latent source


class LatentPipeline:
    """Draws latents by running the denoising loop, then decodes them.

    The denoiser here is the exact posterior for a synthetic latent mixture,
    so latent draws are cheap, deterministic per seed, and match the full
    sampling distribution rather than a dataset snapshot.
    """

    def __init__(
        self,
        schedule: Optional[CosineSchedule] = None,
        num_conditions: int = 8,
        latent_shape: tuple[int, int, int] = (4, 8, 8),
        n_steps: int = 50,
        cfg_scale: float = 1.0,
        data_seed: int = 0,
    ):
        self.schedule = schedule or make_schedule()
        self.latent_shape = tuple(latent_shape)
        self.n_steps = n_steps
        self.cfg_scale = cfg_scale
        self.dataset: ConditionalDataset = make_latent_mixture(
            num_conditions=num_conditions, shape=latent_shape, seed=data_seed
        )
        self.denoiser = BayesDenoiser(self.dataset.mixtures, self.schedule)
        self.num_conditions = num_conditions

    def latents(self, conditions: torch.Tensor, seed: int) -> torch.Tensor:
        flat = sample(
            self.denoiser,
            self.schedule,
            n_steps=self.n_steps,
            condition=conditions,
            cfg_scale=self.cfg_scale,
            seed=seed,
        )
        return flat.to(torch.float32).reshape(-1, *self.latent_shape)

    def images(self, decoder: ImageDecoder, conditions: torch.Tensor, seed: int) -> torch.Tensor:
        with torch.no_grad():
            return decoder(self.latents(conditions, seed))


# ---------------------------------------------------------------------------
# distillation


@dataclasses.dataclass
class DecoderDistillConfig:
    steps: int = 400
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    heldout_n: int = 64
    heldout_seed: int = 777
    log_every: int = 25

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.heldout_n < 1:
            raise ValueError("steps, batch_size and heldout_n must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def heldout_image_mse(
    student: ImageDecoder,
    teacher: ImageDecoder,
    pipeline: LatentPipeline,
    n: int = 64,
    seed: int = 777,
) -> float:
    """MSE between the two decoders' images on fixed-seed pipeline latents."""
    conditions = pipeline.dataset.balanced_conditions(n)
    latents = pipeline.latents(conditions, seed=seed)
    with torch.no_grad():
        return float(torch.mean((student(latents) - teacher(latents)) ** 2))


def distill_decoder(
    teacher: ImageDecoder,
    student: ImageDecoder,
    pipeline: LatentPipeline,
    config: Optional[DecoderDistillConfig] = None,
) -> tuple[ImageDecoder, dict]:
    """Train the student to match the frozen teacher's images.

    Every batch decodes freshly sampled latents (new seed per step) so the
    student never sees the same latent twice; the held-out measurement uses
    its own fixed seed throughout.
    """
    config = config or DecoderDistillConfig()
    undistilled = heldout_image_mse(
        student, teacher, pipeline, n=config.heldout_n, seed=config.heldout_seed
    )
    opt = torch.optim.Adam(
        student.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    g = torch.Generator().manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        conditions = torch.randint(
            pipeline.num_conditions, (config.batch_size,), generator=g
        )
        batch_seed = config.seed * 1_000_003 + step + 1
        latents = pipeline.latents(conditions, seed=batch_seed)
        with torch.no_grad():
            target = teacher(latents)
        loss = torch.mean((student(latents) - target) ** 2)
        if not torch.isfinite(loss.detach()):
            raise RuntimeError(f"non-finite distillation loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            history.append({"step": step, "loss": float(loss.detach())})
    distilled = heldout_image_mse(
        student, teacher, pipeline, n=config.heldout_n, seed=config.heldout_seed
    )
    report = {
        "undistilled_mse": undistilled,
        "distilled_mse": distilled,
        "mse_ratio": distilled / undistilled if undistilled > 0 else 0.0,
        "param_ratio": parameter_ratio(student, teacher),
        "history": history,
    }
    return student, report
