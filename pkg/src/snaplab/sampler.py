"""DDIM sampling, classifier-free guidance, and exact Gaussian-mixture oracles.

The deterministic DDIM update from t to t' re-expresses the model prediction
as (x_hat, eps_hat) and recombines at the new time:

    z_t' = alpha_t' * x_hat + sigma_t' * eps_hat.

For diagonal Gaussian-mixture data the posterior denoiser is available in
closed form, which gives an exact reference model: every sampling and
distillation routine in this package can be checked against it.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Mapping, Union

import torch

from .schedule import (
    ENDPOINT_MARGIN,
    CosineSchedule,
    LatentState,
    Prediction,
    PredictionKind,
    SingularityError,
    _as_time,
    _coeff_like,
    x_eps_from_prediction,
)

LOG_2PI = math.log(2.0 * math.pi)

# A model is anything callable as model(z, t, c) -> Prediction with a
# data_dim attribute and a null_condition label for the unconditional branch.
Model = Callable[..., Prediction]


@dataclasses.dataclass(frozen=True)
class GaussianMixture:
    """Diagonal Gaussian mixture over R^d.

    weights: (K,), nonnegative, summing to 1.
    means: (K, d).
    variances: (K, d), nonnegative.  A zero variance is a point mass along
    that coordinate; posteriors stay proper as long as sigma_t > 0.
    """

    weights: torch.Tensor
    means: torch.Tensor
    variances: torch.Tensor

    def __post_init__(self):
        w = torch.as_tensor(self.weights, dtype=torch.float64)
        m = torch.as_tensor(self.means, dtype=torch.float64)
        v = torch.as_tensor(self.variances, dtype=torch.float64)
        if m.dim() != 2 or v.shape != m.shape or w.shape != m.shape[:1]:
            raise ValueError(
                f"inconsistent mixture shapes: weights {tuple(w.shape)}, "
                f"means {tuple(m.shape)}, variances {tuple(v.shape)}"
            )
        if torch.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if torch.any(v < 0):
            raise ValueError("mixture variances must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def sample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        idx = torch.multinomial(
            self.weights, n, replacement=True, generator=generator
        )
        noise = torch.randn(n, self.dim, generator=generator, dtype=torch.float64)
        return self.means[idx] + noise * self.variances[idx].sqrt()

    @property
    def mean(self) -> torch.Tensor:
        return (self.weights[:, None] * self.means).sum(0)


def merge_mixtures(
    mixtures: list[GaussianMixture], weights: list[float] | None = None
) -> GaussianMixture:
    """Pool several mixtures into one (used for the unconditional branch)."""
    if weights is None:
        weights = [1.0 / len(mixtures)] * len(mixtures)
    w = torch.cat(
        [wi * m.weights for wi, m in zip(weights, mixtures)]
    )
    return GaussianMixture(
        weights=w / w.sum(),
        means=torch.cat([m.means for m in mixtures]),
        variances=torch.cat([m.variances for m in mixtures]),
    )


def _posterior_x_mean(
    mixture: GaussianMixture, z: torch.Tensor, alpha: torch.Tensor, sigma: torch.Tensor
) -> torch.Tensor:
    """E[x | z_t = z] for z_t = alpha x + sigma eps, x ~ mixture.

    z: (B, d) float64.  alpha/sigma: scalar or (B,) float64.
    """
    a = alpha.reshape(-1, 1, 1)  # (B|1, 1, 1)
    s = sigma.reshape(-1, 1, 1)
    zb = z.unsqueeze(1)  # (B, 1, d)
    mu = mixture.means.unsqueeze(0)  # (1, K, d)
    var = a**2 * mixture.variances.unsqueeze(0) + s**2  # (B|1, K, d)
    resid = zb - a * mu
    log_like = -0.5 * ((resid**2 / var) + var.log() + LOG_2PI).sum(-1)  # (B, K)
    logits = torch.log(mixture.weights).unsqueeze(0) + log_like
    flat = logits.max(dim=1).values
    if torch.any(torch.isinf(flat) & (flat < 0)) or torch.any(torch.isnan(flat)):
        raise FloatingPointError(
            "all mixture responsibilities underflowed; latent is too far from support"
        )
    resp = torch.softmax(logits, dim=1)  # (B, K)
    cond_mean = mu + (a * mixture.variances.unsqueeze(0) / var) * resid  # (B, K, d)
    return (resp.unsqueeze(-1) * cond_mean).sum(1)


def analytic_epsilon(
    mixture: GaussianMixture, state: LatentState, schedule: CosineSchedule
) -> Prediction:
    """Bayes-optimal noise prediction E[eps | z_t] for mixture data.

    Requires sigma_t > 0 (t at least ENDPOINT_MARGIN): at t = 0 the latent
    carries no noise to predict.
    """
    t = _as_time(state.t)
    if torch.any(t < ENDPOINT_MARGIN):
        raise SingularityError("analytic_epsilon requires sigma_t > 0")
    alpha, sigma = schedule.alpha_sigma(t)
    z = state.z.to(torch.float64)
    squeeze = z.dim() == 1
    if squeeze:
        z = z.unsqueeze(0)
    x_mean = _posterior_x_mean(mixture, z, alpha.reshape(-1), sigma.reshape(-1))
    a = _coeff_like(alpha, z)
    s = _coeff_like(sigma, z)
    eps = (z - a * x_mean) / s
    if squeeze:
        eps = eps.squeeze(0)
    return Prediction(kind=PredictionKind.EPSILON, value=eps)


class BayesDenoiser:
    """Exact posterior denoiser for per-condition Gaussian mixtures.

    Behaves like a trained model: callable as (z, t, c) -> Prediction, with a
    reserved null condition that falls back to the pooled mixture.  The output
    parameterization is selectable; v is the default because it is finite on
    the whole time range, including the t = 1 grid start.
    """

    def __init__(
        self,
        mixtures: Mapping[int, GaussianMixture],
        schedule: CosineSchedule,
        kind: PredictionKind = PredictionKind.V,
    ):
        self.mixtures = dict(mixtures)
        self.schedule = schedule
        self.kind = kind
        self.num_conditions = len(self.mixtures)
        if sorted(self.mixtures) != list(range(self.num_conditions)):
            raise ValueError("conditions must be labeled 0..K-1")
        self.null_condition = self.num_conditions
        self.pooled = merge_mixtures([self.mixtures[k] for k in range(self.num_conditions)])
        dims = {m.dim for m in self.mixtures.values()}
        if len(dims) != 1:
            raise ValueError("all condition mixtures must share a dimension")
        (self.data_dim,) = dims
        self.dtype = torch.float64

    def _mixture_for(self, label: int) -> GaussianMixture:
        if label == self.null_condition:
            return self.pooled
        return self.mixtures[label]

    def __call__(
        self, z: torch.Tensor, t, c: Union[int, torch.Tensor]
    ) -> Prediction:
        t = _as_time(t)
        if torch.any(t < ENDPOINT_MARGIN):
            raise SingularityError("Bayes denoiser requires sigma_t > 0")
        z = z.to(torch.float64)
        squeeze = z.dim() == 1
        if squeeze:
            z = z.unsqueeze(0)
        if isinstance(c, int):
            c = torch.full((z.shape[0],), c, dtype=torch.long)
        alpha, sigma = self.schedule.alpha_sigma(t)
        alpha = alpha.reshape(-1).expand(z.shape[0])
        sigma = sigma.reshape(-1).expand(z.shape[0])
        x_mean = torch.empty_like(z)
        for label in c.unique().tolist():
            rows = c == label
            x_mean[rows] = _posterior_x_mean(
                self._mixture_for(int(label)), z[rows], alpha[rows], sigma[rows]
            )
        a = _coeff_like(alpha, z)
        s = _coeff_like(sigma, z)
        eps = (z - a * x_mean) / s
        if self.kind is PredictionKind.X:
            out = x_mean
        elif self.kind is PredictionKind.EPSILON:
            out = eps
        else:
            out = a * eps - s * x_mean
        if squeeze:
            out = out.squeeze(0)
        return Prediction(kind=self.kind, value=out)


def ddim_step(
    schedule: CosineSchedule,
    state: LatentState,
    pred: Prediction,
    t_next,
) -> LatentState:
    """One deterministic DDIM update from state.t down to t_next."""
    t_cur = _as_time(state.t)
    t_nxt = _as_time(t_next)
    if torch.any(t_nxt > t_cur):
        raise ValueError(
            f"ddim_step must move toward data: t_next={t_next!r} > t={state.t!r}"
        )
    x_hat, eps_hat = x_eps_from_prediction(schedule, pred, state)
    alpha_n, sigma_n = schedule.alpha_sigma(t_nxt)
    z_next = _coeff_like(alpha_n, x_hat) * x_hat + _coeff_like(sigma_n, eps_hat) * eps_hat
    return LatentState(z=z_next, t=t_next)


def cfg_combine(cond: Prediction, uncond: Prediction, w: float) -> Prediction:
    """Classifier-free guidance: w * cond - (w - 1) * uncond.

    At w = 1 this returns the conditional prediction exactly.  Both inputs
    must live in the same parameterization; guidance commutes with convert,
    so it does not matter which one, as long as it is consistent.
    """
    if cond.kind is not uncond.kind:
        raise ValueError(
            f"guidance mixes parameterizations: {cond.kind} vs {uncond.kind}"
        )
    if w < 0:
        raise ValueError(f"guidance scale must be nonnegative, got {w}")
    return Prediction(kind=cond.kind, value=w * cond.value - (w - 1.0) * uncond.value)


def sample(
    model: Model,
    schedule: CosineSchedule,
    n_steps: int,
    condition: Union[int, torch.Tensor],
    cfg_scale: float = 1.0,
    seed: int = 0,
    n_samples: int = 1,
    mask=None,
) -> torch.Tensor:
    """Draw samples with n_steps DDIM updates on the grid t_i = 1 - i/n_steps.

    condition is a single label (shared by all samples) or a (n_samples,)
    tensor of labels.  cfg_scale = 1 skips the unconditional branch entirely.
    Deterministic given seed.  mask, when given, is forwarded to the model
    (block-skipping ablations).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    g = torch.Generator().manual_seed(seed)
    dtype = getattr(model, "dtype", torch.float32)
    if isinstance(condition, int):
        cond = torch.full((n_samples,), condition, dtype=torch.long)
    else:
        cond = condition.to(torch.long)
        n_samples = cond.shape[0]
    null = torch.full_like(cond, model.null_condition)
    z = torch.randn(n_samples, model.data_dim, generator=g, dtype=dtype)
    state = LatentState(z=z, t=1.0)
    kwargs = {} if mask is None else {"mask": mask}
    with torch.no_grad():
        for i in range(1, n_steps + 1):
            t_cur = 1.0 - (i - 1) / n_steps
            t_next = 1.0 - i / n_steps
            pred = model(state.z, t_cur, cond, **kwargs)
            if cfg_scale != 1.0:
                pred_u = model(state.z, t_cur, null, **kwargs)
                pred = cfg_combine(pred, pred_u, cfg_scale)
            if not torch.isfinite(pred.value).all():
                raise RuntimeError(
                    f"non-finite prediction at step {i}/{n_steps} (t={t_cur:g}, "
                    f"cfg_scale={cfg_scale})"
                )
            state = ddim_step(schedule, state, pred, t_next)
    return state.z
