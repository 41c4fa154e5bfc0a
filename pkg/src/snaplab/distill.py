"""Step distillation: teach a student to cover two teacher DDIM steps in one.

For a starting latent z_t on the student grid {i/N_S}, the teacher walks
t -> t - 1/(2 N_S) -> t - 1/N_S with two DDIM updates.  The student's single
prediction at t implies a one-step landing point; solving that landing
equation for the clean-data estimate gives the regression target

    x_target = (z_t'' - (sigma_t'' / sigma_t) z_t)
               / (alpha_t'' - (sigma_t'' / sigma_t) alpha_t),

which the student's x-reconstruction is pulled toward under a
truncated-signal-to-noise weight max(alpha^2/sigma^2, 1), clipped at 1e4.

The guidance-aware variant replaces every prediction, teacher and student,
by its guided combination at a scale drawn once per batch; a scale range
collapsed to [1, 1] reproduces the vanilla loss exactly.  The total loss
mixes a distillation branch with the plain denoising loss, with an optional
dynamic balance that keeps the regularizer a fixed fraction of the
distillation term.
"""

from __future__ import annotations

import dataclasses
import enum
import time
from typing import Optional

import torch

from .nets import ConditionalDenoiser, clone_model
from .sampler import cfg_combine, ddim_step
from .schedule import (
    CosineSchedule,
    LatentState,
    Prediction,
    PredictionKind,
    SingularityError,
    _as_time,
    _coeff_like,
    convert,
    diffuse,
)
from .trainer import TrainingDiverged, denoise_loss

SNR_WEIGHT_CAP = 1e4
TARGET_DENOM_FLOOR = 1e-8


class DistillMode(enum.Enum):
    DIRECT = "direct"
    PROGRESSIVE = "progressive"


class GammaMode(enum.Enum):
    CONSTANT = "constant"
    DYNAMIC = "dynamic"


@dataclasses.dataclass
class DistillConfig:
    teacher_steps: int
    student_steps: int
    cfg_range: tuple[float, float] = (2.0, 14.0)
    cfg_probability: float = 0.1
    gamma: float = 0.2
    gamma_mode: GammaMode = GammaMode.DYNAMIC
    mode: DistillMode = DistillMode.DIRECT
    seed: int = 0
    # optimizer knobs for the training loop around the losses
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    uncond_probability: float = 0.1
    log_every: int = 50
    divergence_factor: float = 1e3

    def __post_init__(self):
        lo, hi = self.cfg_range
        if lo > hi or lo < 0:
            raise ValueError(f"cfg_range must be 0 <= lo <= hi, got {self.cfg_range}")
        if not 0.0 <= self.cfg_probability <= 1.0:
            raise ValueError("cfg_probability must be in [0, 1]")
        if self.student_steps < 1:
            raise ValueError("student_steps must be >= 1")
        if self.teacher_steps % self.student_steps != 0:
            raise ValueError(
                f"student grid must nest in the teacher grid: "
                f"{self.student_steps} does not divide {self.teacher_steps}"
            )
        if self.mode is DistillMode.DIRECT:
            if self.teacher_steps != 2 * self.student_steps:
                raise ValueError(
                    "direct distillation halves the step count: teacher_steps "
                    f"must be 2 x student_steps, got {self.teacher_steps} -> "
                    f"{self.student_steps}"
                )
        else:
            ratio = self.teacher_steps // self.student_steps
            if ratio < 2 or ratio & (ratio - 1):
                raise ValueError(
                    "progressive distillation halves repeatedly: teacher/student "
                    f"must be a power of two >= 2, got {ratio}"
                )
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps, batch_size, learning_rate must be positive")


@dataclasses.dataclass
class DistillBatchOutcome:
    loss_total: torch.Tensor
    loss_dstl: torch.Tensor
    loss_ori: torch.Tensor
    used_cfg: bool
    w_sampled: Optional[float]
    gamma_eff: float


def snr_weight(schedule: CosineSchedule, t) -> torch.Tensor:
    """Truncated SNR weight max(alpha^2 / sigma^2, 1), clipped at 1e4."""
    tt = _as_time(t)
    alpha, sigma = schedule.alpha_sigma(tt)
    if torch.any(sigma == 0):
        raise SingularityError("snr weight undefined at sigma_t = 0")
    return (alpha**2 / sigma**2).clamp(min=1.0, max=SNR_WEIGHT_CAP)


def _predict(model, z, t, c, guidance: Optional[float], mask=None):
    kwargs = {} if mask is None else {"mask": mask}
    pred = model(z, t, c, **kwargs)
    if guidance is None:
        return pred
    null = torch.full_like(torch.as_tensor(c), model.null_condition)
    uncond = model(z, t, null, **kwargs)
    return cfg_combine(pred, uncond, guidance)


def teacher_two_steps(
    teacher,
    schedule: CosineSchedule,
    z_t: torch.Tensor,
    t,
    t_mid,
    t_end,
    c: torch.Tensor,
    guidance: Optional[float] = None,
) -> torch.Tensor:
    """Run the frozen teacher t -> t_mid -> t_end and return z_{t_end}."""
    tt, tm, te = _as_time(t), _as_time(t_mid), _as_time(t_end)
    if torch.any(te >= tm) or torch.any(tm >= tt) or torch.any(te < 0) or torch.any(tt > 1):
        raise ValueError("need 0 <= t_end < t_mid < t <= 1")
    with torch.no_grad():
        state = LatentState(z=z_t, t=tt)
        for t_next in (tm, te):
            pred = _predict(teacher, state.z, state.t, c, guidance)
            state = ddim_step(schedule, state, pred, t_next)
    return state.z


def vanilla_target(
    schedule: CosineSchedule, z_t: torch.Tensor, z_end: torch.Tensor, t, t_end
) -> torch.Tensor:
    """Solve the one-step landing equation for the student's x target."""
    alpha_t, sigma_t = schedule.alpha_sigma(_as_time(t))
    alpha_e, sigma_e = schedule.alpha_sigma(_as_time(t_end))
    if torch.any(sigma_t == 0):
        raise SingularityError("landing equation divides by sigma_t")
    ratio = sigma_e / sigma_t
    denom = alpha_e - ratio * alpha_t
    if torch.any(denom.abs() <= TARGET_DENOM_FLOOR):
        raise ValueError("degenerate landing equation: |denominator| <= 1e-8")
    return (z_end - _coeff_like(ratio, z_t) * z_t) / _coeff_like(denom, z_t)


def _grid_times(config: DistillConfig, batch: int, generator: torch.Generator):
    """Per-sample (t, t_mid, t_end) on the student grid, exact rationals."""
    n = config.student_steps
    i = torch.randint(1, n + 1, (batch,), generator=generator, dtype=torch.int64)
    t = i.to(torch.float64) / n
    t_mid = (2 * i - 1).to(torch.float64) / (2 * n)
    t_end = (i - 1).to(torch.float64) / n
    return t, t_mid, t_end


def _dstl_core(
    student,
    teacher,
    batch,
    config: DistillConfig,
    schedule: CosineSchedule,
    generator: torch.Generator,
    guided: bool,
) -> tuple[torch.Tensor, Optional[float]]:
    x, c = batch
    t, t_mid, t_end = _grid_times(config, x.shape[0], generator)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    w = None
    if guided:
        lo, hi = config.cfg_range
        w = lo + (hi - lo) * float(torch.rand(1, generator=generator))
    state = diffuse(schedule, x, eps, t)
    z_end = teacher_two_steps(
        teacher, schedule, state.z, t, t_mid, t_end, c, guidance=w
    )
    target = vanilla_target(schedule, state.z, z_end, t, t_end)
    pred = _predict(student, state.z, t.to(x.dtype), c, guidance=w)
    x_hat = convert(schedule, pred, state, PredictionKind.X).value
    weight = snr_weight(schedule, t).to(x.dtype)
    per_sample = ((x_hat - target.to(x.dtype)) ** 2).mean(dim=1)
    return (weight * per_sample).mean(), w


def vanilla_dstl_loss(
    student, teacher, batch, config: DistillConfig, schedule, generator
) -> DistillBatchOutcome:
    loss, _ = _dstl_core(student, teacher, batch, config, schedule, generator, guided=False)
    return DistillBatchOutcome(
        loss_total=loss,
        loss_dstl=loss,
        loss_ori=torch.zeros(()),
        used_cfg=False,
        w_sampled=None,
        gamma_eff=0.0,
    )


def cfg_dstl_loss(
    student, teacher, batch, config: DistillConfig, schedule, generator
) -> DistillBatchOutcome:
    loss, w = _dstl_core(student, teacher, batch, config, schedule, generator, guided=True)
    return DistillBatchOutcome(
        loss_total=loss,
        loss_dstl=loss,
        loss_ori=torch.zeros(()),
        used_cfg=True,
        w_sampled=w,
        gamma_eff=0.0,
    )


def total_loss(
    student, teacher, batch, config: DistillConfig, schedule, generator
) -> DistillBatchOutcome:
    """Mix the distillation branch with the plain denoising loss."""
    use_cfg = bool(torch.rand(1, generator=generator) < config.cfg_probability)
    core = (cfg_dstl_loss if use_cfg else vanilla_dstl_loss)(
        student, teacher, batch, config, schedule, generator
    )
    loss_ori = denoise_loss(
        student,
        batch,
        schedule,
        parameterization=PredictionKind.V,
        generator=generator,
        uncond_probability=config.uncond_probability,
    )
    if config.gamma_mode is GammaMode.CONSTANT:
        gamma_eff = config.gamma
    else:
        gamma_eff = (
            config.gamma
            * float(core.loss_dstl.detach())
            / max(float(loss_ori.detach()), 1e-8)
        )
    return DistillBatchOutcome(
        loss_total=core.loss_dstl + gamma_eff * loss_ori,
        loss_dstl=core.loss_dstl,
        loss_ori=loss_ori,
        used_cfg=use_cfg,
        w_sampled=core.w_sampled,
        gamma_eff=gamma_eff,
    )


# ---------------------------------------------------------------------------
# training pipelines


@dataclasses.dataclass
class StageResult:
    teacher_steps: int
    student_steps: int
    model: ConditionalDenoiser
    metrics: list[dict]


def _stage_plan(config: DistillConfig) -> list[tuple[int, int]]:
    if config.mode is DistillMode.DIRECT:
        return [(config.teacher_steps, config.student_steps)]
    plan = []
    n = config.teacher_steps
    while n > config.student_steps:
        plan.append((n, n // 2))
        n //= 2
    return plan


def distill(
    teacher: ConditionalDenoiser,
    student_init: ConditionalDenoiser,
    dataset,
    config: DistillConfig,
    schedule: CosineSchedule,
) -> tuple[ConditionalDenoiser, list[StageResult]]:
    """Run the configured pipeline; the training budget is split evenly
    across stages so direct and progressive runs are comparable."""
    plan = _stage_plan(config)
    steps_per_stage = max(1, config.steps // len(plan))
    g = torch.Generator().manual_seed(config.seed)
    current_teacher = teacher
    student = student_init
    results: list[StageResult] = []
    for stage_idx, (n_t, n_s) in enumerate(plan):
        stage_cfg = dataclasses.replace(
            config, mode=DistillMode.DIRECT, teacher_steps=n_t, student_steps=n_s
        )
        metrics: list[dict] = []
        opt = torch.optim.AdamW(
            student.parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        start = time.perf_counter()
        # The truncated-SNR weight makes single-batch losses heavy-tailed, so
        # the divergence baseline is the worst loss seen over a short grace
        # window rather than whatever batch happened to come first.
        grace = min(10, steps_per_stage)
        initial = 1e-12
        for step in range(steps_per_stage):
            batch = dataset.sample_batch(config.batch_size, g)
            out = total_loss(student, current_teacher, batch, stage_cfg, schedule, g)
            value = float(out.loss_total.detach())
            if step < grace:
                initial = max(initial, value)
            diverged = step >= grace and value > config.divergence_factor * initial
            if not torch.isfinite(out.loss_total.detach()) or diverged:
                raise TrainingDiverged(
                    f"distillation diverged at stage {stage_idx} step {step}: "
                    f"loss {value:g} vs initial {initial:g}",
                    metrics,
                )
            opt.zero_grad()
            out.loss_total.backward()
            opt.step()
            if step % config.log_every == 0 or step == steps_per_stage - 1:
                metrics.append(
                    {
                        "step": step,
                        "loss": value,
                        "loss_dstl": float(out.loss_dstl.detach()),
                        "loss_ori": float(out.loss_ori.detach()),
                        "used_cfg": int(out.used_cfg),
                        "gamma_eff": out.gamma_eff,
                        "wallclock": time.perf_counter() - start,
                    }
                )
        results.append(StageResult(n_t, n_s, clone_model(student), metrics))
        current_teacher = student
        student = clone_model(student)
    return results[-1].model, results


def heldout_distill_mse(
    student,
    teacher,
    dataset,
    config: DistillConfig,
    schedule: CosineSchedule,
    n_batches: int = 8,
    batch_size: int = 512,
    seed: int = 987,
) -> float:
    """Unweighted x-space MSE of the student against fresh teacher targets.

    Running it with student = teacher measures the teacher's own one-step vs
    two-step inconsistency, the natural floor for a distilled student.
    """
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_batches):
            x, c = dataset.sample_batch(batch_size, g)
            t, t_mid, t_end = _grid_times(config, batch_size, g)
            eps = torch.randn(x.shape, generator=g, dtype=x.dtype)
            state = diffuse(schedule, x, eps, t)
            z_end = teacher_two_steps(teacher, schedule, state.z, t, t_mid, t_end, c)
            target = vanilla_target(schedule, state.z, z_end, t, t_end)
            pred = student(state.z, t.to(x.dtype), c)
            x_hat = convert(schedule, pred, state, PredictionKind.X).value
            total += float(((x_hat - target.to(x.dtype)) ** 2).mean())
    return total / n_batches


def compare_pipelines(
    teacher: ConditionalDenoiser,
    dataset,
    schedule: CosineSchedule,
    probe,
    budget_steps: int,
    final_steps: int = 8,
    direct_teacher_steps: int = 16,
    progressive_teacher_steps: int = 64,
    eval_w: tuple[float, ...] = (3.0,),
    n_eval: int = 2048,
    seed: int = 0,
    base_config: Optional[DistillConfig] = None,
    out_path=None,
    config_hash: str = "",
) -> list[dict]:
    """Direct vs progressive under one training budget; returns CSV rows."""
    from .evaldata import condition_consistency, distribution_distance

    rows = []
    for mode, t_steps in (
        (DistillMode.DIRECT, direct_teacher_steps),
        (DistillMode.PROGRESSIVE, progressive_teacher_steps),
    ):
        base = base_config or DistillConfig(
            teacher_steps=2 * final_steps, student_steps=final_steps
        )
        cfg = dataclasses.replace(
            base,
            mode=mode,
            teacher_steps=t_steps,
            student_steps=final_steps,
            steps=budget_steps,
            seed=seed,
        )
        student, results = distill(teacher, clone_model(teacher), dataset, cfg, schedule)
        mse = heldout_distill_mse(
            student,
            teacher,
            dataset,
            dataclasses.replace(cfg, mode=DistillMode.DIRECT,
                                teacher_steps=2 * final_steps, student_steps=final_steps),
            schedule,
        )
        from .sampler import sample

        reference, _ = dataset.reference_sample(n_eval, seed=77)
        conditions = dataset.balanced_conditions(n_eval)
        for w in eval_w:
            draws = sample(
                student, schedule, n_steps=final_steps, condition=conditions,
                cfg_scale=w, seed=seed + 31, n_samples=n_eval,
            )
            rows.append(
                {
                    "mode": mode.value,
                    "stages": len(results),
                    "budget_steps": budget_steps,
                    "w": w,
                    "dist": distribution_distance(draws.to(torch.float64), reference),
                    "consistency": condition_consistency(draws, conditions, probe),
                    "heldout_mse": mse,
                    "seed": seed,
                }
            )
    if out_path is not None:
        from pathlib import Path

        cols = list(rows[0])
        lines = [f"# config_hash={config_hash}", ",".join(cols)]
        for r in rows:
            lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in cols))
        Path(out_path).write_text("\n".join(lines) + "\n")
    return rows
