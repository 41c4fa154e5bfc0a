"""Latency-driven architecture search over the block genome.

Each candidate edit (removing one block) is scored by

    value = delta_quality / delta_latency,

both deltas measured against the unedited model: quality through a fixed
sampling evaluation (or an injected proxy), latency through an additive
lookup table keyed by (kind, stage, width).  Removing a block makes both
deltas negative, so value is the quality lost per millisecond saved; blocks
with low value are cheap to drop, blocks with high value are worth keeping
or duplicating.

The search alternates short robust-training intervals with one group edit
per round: while over the latency target it removes the ``group_size``
lowest-value blocks, otherwise it duplicates the highest-value ones.  It
stops once the round budget is spent and the target is met.
"""

from __future__ import annotations

import dataclasses
import platform
import statistics
import time
from pathlib import Path
from typing import Callable, Optional

import torch

from .nets import (
    Action,
    ActionDirection,
    ArchitectureGenome,
    BlockKind,
    ConditionalDenoiser,
    CrossAttentionBlock,
    ResidualBlock,
    SkipConfig,
    mutate,
)
from .sampler import sample
from .schedule import CosineSchedule
from .trainer import TrainConfig, fit


class UnreachableTargetError(ValueError):
    """No genome this search can reach satisfies the latency target."""


class LatencyTableError(ValueError):
    """A benchmark entry was invalid; the whole table is rejected."""


TableKey = tuple[str, int, int]  # (kind value, stage, width)


@dataclasses.dataclass(frozen=True)
class LatencyTable:
    """Additive per-block latency estimates in milliseconds."""

    entries: dict[TableKey, float]
    reps: int = 1
    machine_id: str = ""

    def __post_init__(self):
        if not self.entries:
            raise LatencyTableError("latency table is empty")
        for key, ms in self.entries.items():
            if not (ms > 0 and ms == ms and ms != float("inf")):
                raise LatencyTableError(f"invalid latency {ms!r} for {key}")

    def lookup(self, kind: BlockKind, stage: int, width: int) -> float:
        key = (kind.value, stage, width)
        if key not in self.entries:
            raise KeyError(f"no latency entry for {key}")
        return self.entries[key]

    def save(self, path: str | Path) -> None:
        lines = [
            f"# machine_id={self.machine_id}",
            f"# reps={self.reps}",
            "kind,stage,width,latency_ms",
        ]
        for (kind, stage, width), ms in sorted(self.entries.items()):
            lines.append(f"{kind},{stage},{width},{ms!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LatencyTable":
        entries: dict[TableKey, float] = {}
        machine_id, reps = "", 1
        for line in Path(path).read_text().splitlines():
            if line.startswith("# machine_id="):
                machine_id = line.split("=", 1)[1]
            elif line.startswith("# reps="):
                reps = int(line.split("=", 1)[1])
            elif line and not line.startswith(("#", "kind,")):
                kind, stage, width, ms = line.split(",")
                entries[(kind, int(stage), int(width))] = float(ms)
        return cls(entries=entries, reps=reps, machine_id=machine_id)


def analytic_bench(kind: BlockKind, stage: int, width: int, dims: Optional[dict] = None) -> float:
    """Parameter-count cost proxy in pseudo-milliseconds.

    Wall-clock timing jitters between runs; this proxy keeps the whole search
    a deterministic function of the genome, which reproduction pipelines need.
    The constant maps roughly 1k parameters to 1 ms.
    """
    dims = dims or {}
    time_dim = dims.get("time_dim", 64)
    token_dim = dims.get("token_dim", 16)
    attn_dim = dims.get("attn_dim", 16)
    if kind is BlockKind.RESNET:
        params = 2 * width * width + 3 * width + time_dim * width
    else:
        params = 2 * attn_dim * width + 2 * token_dim * attn_dim + 3 * attn_dim + width
    return params / 1000.0


def _default_bench(kind: BlockKind, width: int, batch: int = 256, dims=None) -> float:
    """Wall-clock one isolated block forward, in milliseconds."""
    dims = dims or {}
    g = torch.Generator().manual_seed(0)
    h = torch.randn(batch, width, generator=g)
    if kind is BlockKind.RESNET:
        block = ResidualBlock(width, dims.get("time_dim", 64))
        aux = torch.randn(batch, dims.get("time_dim", 64), generator=g)
    else:
        block = CrossAttentionBlock(width, dims.get("token_dim", 16), dims.get("attn_dim", 16))
        aux = torch.randn(batch, dims.get("n_tokens", 4), dims.get("token_dim", 16), generator=g)
    with torch.no_grad():
        block(h, aux)  # warm up
        start = time.perf_counter()
        block(h, aux)
        return (time.perf_counter() - start) * 1e3


def build_latency_table(
    genome: ArchitectureGenome,
    bench: Optional[Callable[[BlockKind, int, int], float]] = None,
    reps: int = 5,
    dims: Optional[dict] = None,
) -> LatencyTable:
    """Median-of-reps benchmark for every (kind, stage, width) in the genome.

    Additions during the search only ever duplicate existing blocks, so the
    initial genome's key set covers everything the search can build.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if bench is None:
        bench = lambda kind, stage, width: _default_bench(kind, width, dims=dims)
    entries: dict[TableKey, float] = {}
    for spec in genome.blocks():
        key = (spec.kind.value, spec.stage, spec.width)
        if key in entries:
            continue
        samples = [float(bench(spec.kind, spec.stage, spec.width)) for _ in range(reps)]
        entries[key] = statistics.median(samples)
    return LatencyTable(entries=entries, reps=reps, machine_id=platform.node())


def genome_latency(genome: ArchitectureGenome, table: LatencyTable) -> float:
    return sum(table.lookup(spec.kind, spec.stage, spec.width) for spec in genome.blocks())


def total_denoising_latency(genome: ArchitectureGenome, table: LatencyTable, steps: int) -> float:
    """Per-step latency times the step count: the whole denoising loop."""
    return genome_latency(genome, table) * steps


# ---------------------------------------------------------------------------
# action scoring


@dataclasses.dataclass
class ValSet:
    """What the quality proxy needs: data, a frozen probe, and a sample size."""

    dataset: object
    probe: object
    n_samples: int = 512


@dataclasses.dataclass(frozen=True)
class ActionScore:
    action: Action
    delta_quality: float
    delta_latency: float
    value: float


def _consistency_quality(
    model, schedule, valset: ValSet, eval_steps: int, cfg_scale: float, seed: int, mask=None
) -> float:
    from .evaldata import condition_consistency

    conditions = valset.dataset.balanced_conditions(valset.n_samples)
    draws = sample(
        model,
        schedule,
        n_steps=eval_steps,
        condition=conditions,
        cfg_scale=cfg_scale,
        seed=seed,
        n_samples=valset.n_samples,
        mask=mask,
    )
    return condition_consistency(draws, conditions, valset.probe)


def evaluate_action(
    model: ConditionalDenoiser,
    action: Action,
    valset: Optional[ValSet],
    table: LatencyTable,
    schedule: Optional[CosineSchedule] = None,
    eval_steps: int = 50,
    cfg_scale: float = 7.5,
    seed: int = 0,
    quality_fn: Optional[Callable] = None,
    base_quality: Optional[float] = None,
) -> ActionScore:
    """Score one edit without touching the input model.

    quality_fn(model, mask) -> float overrides the sampling evaluation; the
    base (unedited) quality can be passed in so a round of candidate scoring
    only measures it once.
    """
    if quality_fn is None:
        quality_fn = lambda m, mask: _consistency_quality(
            m, schedule, valset, eval_steps, cfg_scale, seed, mask=mask
        )
    if base_quality is None:
        base_quality = quality_fn(model, None)
    entry = table.lookup(action.kind, action.stage, model.genome.stages[action.stage].width)
    if action.direction is ActionDirection.REMOVE:
        edited_quality = quality_fn(model, {(action.stage, action.kind.value, action.index): False})
        delta_latency = -entry
    else:
        edited_quality = quality_fn(mutate(model, action), None)
        delta_latency = entry
    delta_quality = edited_quality - base_quality
    return ActionScore(
        action=action,
        delta_quality=delta_quality,
        delta_latency=delta_latency,
        value=delta_quality / delta_latency,
    )


# ---------------------------------------------------------------------------
# the search loop


@dataclasses.dataclass
class EvolveConfig:
    rounds: int = 4
    group_size: int = 2
    train_steps_per_round: int = 0
    eval_steps: int = 50
    cfg_scale: float = 7.5
    seed: int = 0
    batch_size: int = 128
    learning_rate: float = 1e-3
    skip: Optional[SkipConfig] = dataclasses.field(default_factory=SkipConfig)
    uncond_probability: float = 0.1

    def __post_init__(self):
        if self.rounds < 1 or self.group_size < 1:
            raise ValueError("rounds and group_size must be positive")


def _tie_key(score: ActionScore):
    a = score.action
    return (score.value, a.stage, a.index, a.kind.value)


def evolve(
    model: ConditionalDenoiser,
    valset: Optional[ValSet],
    table: LatencyTable,
    latency_target: float,
    config: EvolveConfig,
    schedule: Optional[CosineSchedule] = None,
    dataset=None,
    quality_fn: Optional[Callable] = None,
) -> tuple[ConditionalDenoiser, list[dict]]:
    """Alternate robust training and group edits until the budget is spent
    and the latency target holds.  Returns the edited model and a history of
    per-round records (latency is read back from the table, so the history
    is exactly reproducible from the genome sequence)."""
    cheapest = min(
        table.lookup(spec.kind, spec.stage, spec.width) for spec in model.genome.blocks()
    )
    if latency_target < cheapest:
        raise UnreachableTargetError(
            f"target {latency_target:g} ms is below the cheapest single block "
            f"({cheapest:g} ms); no reachable genome satisfies it"
        )
    history: list[dict] = []
    round_idx = 0
    max_rounds = config.rounds + model.genome.total_blocks() + 8
    while True:
        latency = genome_latency(model.genome, table)
        if round_idx >= config.rounds and latency <= latency_target:
            break
        if round_idx >= max_rounds:
            raise UnreachableTargetError(
                f"latency {latency:g} ms still above target {latency_target:g} ms "
                f"after {round_idx} rounds"
            )
        if config.train_steps_per_round > 0:
            train_cfg = TrainConfig(
                steps=config.train_steps_per_round,
                batch_size=config.batch_size,
                learning_rate=config.learning_rate,
                skip=config.skip,
                seed=config.seed + round_idx,
                uncond_probability=config.uncond_probability,
                log_every=max(1, config.train_steps_per_round // 2),
            )
            fit(model, dataset, train_cfg, schedule)

        if quality_fn is None:
            q_fn = lambda m, mask: _consistency_quality(
                m, schedule, valset, config.eval_steps, config.cfg_scale,
                seed=config.seed * 1000 + round_idx, mask=mask,
            )
        else:
            q_fn = quality_fn
        base_quality = q_fn(model, None)
        scores = [
            evaluate_action(
                model,
                Action(ActionDirection.REMOVE, spec.stage, spec.kind, spec.index),
                valset,
                table,
                quality_fn=q_fn,
                base_quality=base_quality,
            )
            for spec in model.genome.blocks()
        ]
        removing = latency > latency_target
        if removing:
            ranked = sorted(scores, key=_tie_key)
        else:
            ranked = sorted(
                scores,
                key=lambda s: (-s.value, s.action.stage, s.action.index, s.action.kind.value),
            )
        applied: list[ActionScore] = []
        if removing:
            budget = model.genome.total_blocks() - 1  # never drain the genome
            chosen = ranked[: min(config.group_size, budget)]
            # higher indices first so earlier removals don't shift later targets
            for s in sorted(chosen, key=lambda s: s.action.index, reverse=True):
                model = mutate(model, s.action)
                applied.append(s)
        else:
            for s in ranked[: config.group_size]:
                model = mutate(
                    model,
                    Action(ActionDirection.ADD, s.action.stage, s.action.kind, s.action.index),
                )
                applied.append(s)
        history.append(
            {
                "round": round_idx,
                "latency_before": latency,
                "latency_after": genome_latency(model.genome, table),
                "quality": base_quality,
                "direction": "remove" if removing else "add",
                "actions": [
                    (s.action.stage, s.action.kind.value, s.action.index, s.value)
                    for s in applied
                ],
                "genome": model.genome.to_dict(),
            }
        )
        round_idx += 1
    return model, history


def write_history_csv(path: str | Path, history: list[dict], seed: int, config_hash: str = "") -> None:
    lines = [
        f"# config_hash={config_hash}",
        "round,latency_before,latency_after,quality,direction,n_actions,seed",
    ]
    for rec in history:
        lines.append(
            f"{rec['round']},{rec['latency_before']!r},{rec['latency_after']!r},"
            f"{rec['quality']!r},{rec['direction']},{len(rec['actions'])},{seed}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
