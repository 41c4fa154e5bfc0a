"""Variance-preserving noise schedule and the exact x / eps / v algebra.

Convention: t = 0 is clean data, t = 1 is pure noise.  A noisy latent is

    z_t = alpha_t * x + sigma_t * eps,        eps ~ N(0, I),

with alpha_t^2 + sigma_t^2 = 1.  The velocity target is

    v_t = alpha_t * eps - sigma_t * x.

Given z_t at a known t, the three prediction heads are affine images of one
another.  Converting away from v needs no division; converting away from x
divides by sigma_t (singular at t = 0) and converting away from eps divides
by alpha_t (singular at t = 1).  Operations that would divide by a vanishing
coefficient reject t within ENDPOINT_MARGIN of the singular endpoint instead
of clamping, so algebra bugs surface as errors rather than silently dampened
values.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from typing import Union

import torch

HALF_PI = math.pi / 2.0

# Reject t this close to a singular endpoint rather than clamp.
ENDPOINT_MARGIN = 1e-6

TimeLike = Union[float, torch.Tensor]


class SingularityError(ValueError):
    """A conversion would divide by a vanishing schedule coefficient."""


class PredictionKind(enum.Enum):
    EPSILON = "epsilon"
    V = "v"
    X = "x"


@dataclasses.dataclass(frozen=True)
class Prediction:
    """A model output together with the parameterization it lives in."""

    kind: PredictionKind
    value: torch.Tensor


@dataclasses.dataclass(frozen=True)
class LatentState:
    """A latent z at diffusion time t (t may be scalar or per-sample)."""

    z: torch.Tensor
    t: TimeLike


def _as_time(t: TimeLike) -> torch.Tensor:
    """Coerce t to a float64 tensor and range-check it."""
    tt = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
    if not torch.is_floating_point(tt):
        tt = tt.to(torch.float64)
    if torch.any(tt < 0.0) or torch.any(tt > 1.0):
        raise ValueError(f"diffusion time must lie in [0, 1], got {t!r}")
    return tt


def _coeff_like(coeff: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Shape a per-sample coefficient vector so it broadcasts against ref."""
    c = coeff.to(ref.dtype)
    while c.dim() < ref.dim():
        c = c.unsqueeze(-1)
    return c


class CosineSchedule:
    """alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2)."""

    name = "cosine"

    def alpha(self, t: TimeLike) -> torch.Tensor:
        return torch.cos(HALF_PI * _as_time(t))

    def sigma(self, t: TimeLike) -> torch.Tensor:
        return torch.sin(HALF_PI * _as_time(t))

    def alpha_sigma(self, t: TimeLike) -> tuple[torch.Tensor, torch.Tensor]:
        tt = _as_time(t)
        return torch.cos(HALF_PI * tt), torch.sin(HALF_PI * tt)


def make_schedule(config: dict | str | None = None) -> CosineSchedule:
    """Build a schedule from a config mapping like {"type": "cosine"}."""
    if config is None:
        return CosineSchedule()
    kind = config if isinstance(config, str) else config.get("type", "cosine")
    if kind != "cosine":
        raise ValueError(f"unknown schedule type {kind!r}")
    return CosineSchedule()


def _guard_sigma(t: torch.Tensor) -> None:
    if torch.any(t < ENDPOINT_MARGIN):
        raise SingularityError(
            f"conversion divides by sigma_t, singular at t=0 (got t={t.min().item():g})"
        )


def _guard_alpha(t: torch.Tensor) -> None:
    if torch.any(t > 1.0 - ENDPOINT_MARGIN):
        raise SingularityError(
            f"conversion divides by alpha_t, singular at t=1 (got t={t.max().item():g})"
        )


def diffuse(
    schedule: CosineSchedule, x: torch.Tensor, eps: torch.Tensor, t: TimeLike
) -> LatentState:
    """Forward-diffuse clean data: z_t = alpha_t x + sigma_t eps."""
    alpha, sigma = schedule.alpha_sigma(t)
    z = _coeff_like(alpha, x) * x + _coeff_like(sigma, eps) * eps
    return LatentState(z=z, t=t)


def v_from_x_eps(
    schedule: CosineSchedule, x: torch.Tensor, eps: torch.Tensor, t: TimeLike
) -> Prediction:
    """Velocity target v_t = alpha_t eps - sigma_t x."""
    alpha, sigma = schedule.alpha_sigma(t)
    v = _coeff_like(alpha, eps) * eps - _coeff_like(sigma, x) * x
    return Prediction(kind=PredictionKind.V, value=v)


def convert(
    schedule: CosineSchedule,
    pred: Prediction,
    state: LatentState,
    target: PredictionKind,
) -> Prediction:
    """Re-express a prediction at (z, t) in another parameterization.

    All conversions are affine in the prediction with coefficients that depend
    only on (z, t), so classifier-free guidance commutes with this map.
    """
    if pred.kind is target:
        return pred
    t = _as_time(state.t)
    alpha, sigma = schedule.alpha_sigma(t)
    z = state.z
    a = _coeff_like(alpha, z)
    s = _coeff_like(sigma, z)
    y = pred.value

    if pred.kind is PredictionKind.V:
        if target is PredictionKind.X:
            out = a * z - s * y
        else:  # EPSILON
            out = s * z + a * y
    elif pred.kind is PredictionKind.X:
        _guard_sigma(t)
        if target is PredictionKind.EPSILON:
            out = (z - a * y) / s
        else:  # V
            out = (a * z - y) / s
    else:  # EPSILON
        _guard_alpha(t)
        if target is PredictionKind.X:
            out = (z - s * y) / a
        else:  # V
            out = (y - s * z) / a
    return Prediction(kind=target, value=out)


def x_eps_from_prediction(
    schedule: CosineSchedule, pred: Prediction, state: LatentState
) -> tuple[torch.Tensor, torch.Tensor]:
    """Both reconstructions (x_hat, eps_hat) implied by a prediction at (z, t)."""
    x_hat = convert(schedule, pred, state, PredictionKind.X).value
    eps_hat = convert(schedule, pred, state, PredictionKind.EPSILON).value
    return x_hat, eps_hat
