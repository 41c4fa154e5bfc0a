"""Desk-scale conditional denoiser with an editable block layout.

The network mirrors a UNet's shape without its cost: three down stages, a
middle stage, and three up stages with long skip connections, each stage
holding a mutable list of residual blocks.  Two block kinds exist:

* RESNET -- residual MLP block, conditioned on the time embedding.
* CROSS_ATTENTION -- residual single-query attention over a small set of
  learned tokens for the discrete condition label.

Within a stage all RESNET blocks run first (by index), then all
CROSS_ATTENTION blocks.  Grouping by kind keeps the execution order of the
survivors unchanged when a block is removed, so skipping a block via mask is
exactly equivalent to deleting it from the genome.

Everything outside the blocks (projections between stages, embeddings, the
output head) is fixed infrastructure: architecture edits never touch it, so
an edited model keeps every untouched weight bit for bit.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import hashlib
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import yaml
from torch import nn

from .schedule import Prediction, PredictionKind

N_STAGES = 7  # 3 down, 1 mid, 3 up
_DOWN, _MID, _UP = (0, 1, 2), 3, (4, 5, 6)


class BlockKind(enum.Enum):
    RESNET = "resnet"
    CROSS_ATTENTION = "cross_attention"


@dataclasses.dataclass(frozen=True)
class StageSpec:
    width: int
    n_resnet: int
    n_attention: int


@dataclasses.dataclass(frozen=True)
class ArchitectureGenome:
    """Per-stage block counts and widths; the unit the search edits."""

    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if len(self.stages) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} stages, got {len(self.stages)}")
        for i, s in enumerate(self.stages):
            if s.width < 1:
                raise ValueError(f"stage {i} width must be positive")
            if s.n_resnet < 0 or s.n_attention < 0:
                raise ValueError(f"stage {i} block counts must be nonnegative")
        if self.total_blocks() < 1:
            raise ValueError("genome must keep at least one block")

    def total_blocks(self) -> int:
        return sum(s.n_resnet + s.n_attention for s in self.stages)

    def count(self, stage: int, kind: BlockKind) -> int:
        s = self.stages[stage]
        return s.n_resnet if kind is BlockKind.RESNET else s.n_attention

    def blocks(self) -> list["BlockSpec"]:
        out = []
        for i, s in enumerate(self.stages):
            for j in range(s.n_resnet):
                out.append(BlockSpec(i, j, BlockKind.RESNET, s.width))
            for j in range(s.n_attention):
                out.append(BlockSpec(i, j, BlockKind.CROSS_ATTENTION, s.width))
        return out

    def to_dict(self) -> list[dict]:
        return [
            {"width": s.width, "resnet": s.n_resnet, "attention": s.n_attention}
            for s in self.stages
        ]

    @classmethod
    def from_dict(cls, records: Sequence[Mapping]) -> "ArchitectureGenome":
        return cls(
            tuple(
                StageSpec(int(r["width"]), int(r["resnet"]), int(r["attention"]))
                for r in records
            )
        )


@dataclasses.dataclass(frozen=True)
class BlockSpec:
    stage: int
    index: int
    kind: BlockKind
    width: int

    @property
    def key(self) -> tuple[int, str, int]:
        return (self.stage, self.kind.value, self.index)


def uniform_genome(
    widths: tuple[int, int, int] = (32, 64, 128),
    n_resnet: int = 1,
    n_attention: int = 1,
) -> ArchitectureGenome:
    w0, w1, w2 = widths
    stage_widths = (w0, w1, w2, w2, w2, w1, w0)
    return ArchitectureGenome(
        tuple(StageSpec(w, n_resnet, n_attention) for w in stage_widths)
    )


class ActionDirection(enum.Enum):
    ADD = "add"
    REMOVE = "remove"


@dataclasses.dataclass(frozen=True)
class Action:
    """One architecture edit.

    REMOVE drops the block at (stage, kind, index); later siblings shift
    down.  ADD appends a new block of the same kind to the stage, copying
    weights from the existing block at (stage, kind, index).
    """

    direction: ActionDirection
    stage: int
    kind: BlockKind
    index: int


def apply_action(genome: ArchitectureGenome, action: Action) -> ArchitectureGenome:
    count = genome.count(action.stage, action.kind)
    if action.index < 0 or action.index >= count:
        verb = "remove" if action.direction is ActionDirection.REMOVE else "copy"
        raise ValueError(
            f"cannot {verb} block {action.index} of {count} "
            f"({action.kind.value}, stage {action.stage})"
        )
    delta = -1 if action.direction is ActionDirection.REMOVE else 1
    stages = list(genome.stages)
    s = stages[action.stage]
    if action.kind is BlockKind.RESNET:
        stages[action.stage] = dataclasses.replace(s, n_resnet=s.n_resnet + delta)
    else:
        stages[action.stage] = dataclasses.replace(s, n_attention=s.n_attention + delta)
    return ArchitectureGenome(tuple(stages))


# ---------------------------------------------------------------------------
# blocks


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int = 32):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
        self.register_buffer("freqs", freqs)
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        ang = t[:, None].to(self.freqs.dtype) * self.freqs[None, :]
        return torch.cat([ang.sin(), ang.cos()], dim=1)


class ResidualBlock(nn.Module):
    """h + MLP(h, t_emb); skipping it is the identity on h."""

    def __init__(self, width: int, time_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.time_proj = nn.Linear(time_dim, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        return h + self.fc2(torch.nn.functional.silu(self.fc1(h) + self.time_proj(t_emb)))


class CrossAttentionBlock(nn.Module):
    """h + Attention(query=h, keys/values=condition tokens)."""

    def __init__(self, width: int, token_dim: int, attn_dim: int = 16):
        super().__init__()
        self.q = nn.Linear(width, attn_dim)
        self.k = nn.Linear(token_dim, attn_dim)
        self.v = nn.Linear(token_dim, attn_dim)
        self.out = nn.Linear(attn_dim, width)
        self.scale = attn_dim**-0.5

    def forward(self, h: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        q = self.q(h).unsqueeze(1)  # (B, 1, a)
        k = self.k(tokens)  # (B, L, a)
        v = self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        return h + self.out((attn @ v).squeeze(1))


def _block_key(stage: int, kind: BlockKind, index: int) -> str:
    tag = "res" if kind is BlockKind.RESNET else "att"
    return f"s{stage}-{tag}-{index}"


@dataclasses.dataclass
class SkipConfig:
    """Per-block execute probabilities for stochastic-depth training."""

    execute_probability: float = 0.9
    overrides: dict[tuple[int, str, int], float] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        for p in [self.execute_probability, *self.overrides.values()]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"execute probability must be in [0, 1], got {p}")

    def probability(self, key: tuple[int, str, int]) -> float:
        return self.overrides.get(key, self.execute_probability)

    def sample_mask(
        self, genome: ArchitectureGenome, generator: torch.Generator
    ) -> dict[tuple[int, str, int], bool]:
        mask = {}
        for spec in genome.blocks():
            p = self.probability(spec.key)
            mask[spec.key] = bool(torch.rand(1, generator=generator) < p)
        return mask


# ---------------------------------------------------------------------------
# model


class ConditionalDenoiser(nn.Module):
    """(z, t, c) -> v prediction, with per-block skip masks.

    Condition labels are 0..num_conditions-1; label num_conditions is the
    reserved null token for the unconditional branch of guidance.
    """

    def __init__(
        self,
        genome: ArchitectureGenome,
        num_conditions: int,
        data_dim: int = 2,
        seed: int = 0,
        time_dim: int = 64,
        token_dim: int = 16,
        n_tokens: int = 4,
        attn_dim: int = 16,
    ):
        super().__init__()
        self.genome = genome
        self.num_conditions = num_conditions
        self.data_dim = data_dim
        self.dims = dict(
            time_dim=time_dim, token_dim=token_dim, n_tokens=n_tokens, attn_dim=attn_dim
        )
        widths = [s.width for s in genome.stages]

        self.time_embed = SinusoidalTimeEmbedding(32)
        self.time_mlp = nn.Sequential(
            nn.Linear(32, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.cond_embed = nn.Embedding(num_conditions + 1, n_tokens * token_dim)
        self.in_proj = nn.Linear(data_dim, widths[0])
        # down transitions feed the next stage; up transitions fuse the long skip
        self.down_proj = nn.ModuleList(
            [nn.Linear(widths[i], widths[i + 1]) for i in _DOWN]
        )
        self.up_proj = nn.ModuleList(
            [
                nn.Linear(widths[u - 1] + widths[2 - k], widths[u])
                for k, u in enumerate(_UP)
            ]
        )
        self.out_proj = nn.Linear(widths[-1], data_dim)

        blocks = {}
        for spec in genome.blocks():
            key = _block_key(spec.stage, spec.kind, spec.index)
            if spec.kind is BlockKind.RESNET:
                blocks[key] = ResidualBlock(spec.width, time_dim)
            else:
                blocks[key] = CrossAttentionBlock(spec.width, token_dim, attn_dim)
        self.blocks = nn.ModuleDict(blocks)
        self._init_parameters(torch.Generator().manual_seed(seed))

    # -- construction ------------------------------------------------------

    def _init_parameters(self, generator: torch.Generator) -> None:
        """Seeded init, independent of global RNG state."""
        for name, p in sorted(self.named_parameters()):
            if p.dim() >= 2:
                bound = 1.0 / math.sqrt(p.shape[1])
                with torch.no_grad():
                    p.uniform_(-bound, bound, generator=generator)
            else:
                with torch.no_grad():
                    p.zero_()
        with torch.no_grad():
            self.cond_embed.weight.normal_(0.0, 0.5, generator=generator)

    @property
    def null_condition(self) -> int:
        return self.num_conditions

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    # -- bookkeeping -------------------------------------------------------

    def block_parameter_counts(self) -> dict[tuple[int, str, int], int]:
        return {
            spec.key: sum(
                p.numel()
                for p in self.blocks[
                    _block_key(spec.stage, spec.kind, spec.index)
                ].parameters()
            )
            for spec in self.genome.blocks()
        }

    def backbone_parameter_count(self) -> int:
        block_params = {id(p) for m in self.blocks.values() for p in m.parameters()}
        return sum(p.numel() for p in self.parameters() if id(p) not in block_params)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().to(torch.float64).numpy().tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------

    def _run_stage(self, stage: int, h, t_emb, tokens, mask):
        spec = self.genome.stages[stage]
        for j in range(spec.n_resnet):
            key = (stage, BlockKind.RESNET.value, j)
            if mask is None or mask.get(key, True):
                h = self.blocks[_block_key(stage, BlockKind.RESNET, j)](h, t_emb)
                self._check_finite(h, key)
        for j in range(spec.n_attention):
            key = (stage, BlockKind.CROSS_ATTENTION.value, j)
            if mask is None or mask.get(key, True):
                h = self.blocks[_block_key(stage, BlockKind.CROSS_ATTENTION, j)](h, tokens)
                self._check_finite(h, key)
        return h

    @staticmethod
    def _check_finite(h: torch.Tensor, key) -> None:
        if not torch.isfinite(h).all():
            raise RuntimeError(f"non-finite activation after block {key}")

    def forward(
        self,
        z: torch.Tensor,
        t,
        c: torch.Tensor,
        mask: Optional[Mapping[tuple[int, str, int], bool]] = None,
    ) -> Prediction:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        B = z.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((B,), float(t))
        t = t.to(self.dtype).expand(B)
        c = torch.as_tensor(c, dtype=torch.long).expand(B)
        z = z.to(self.dtype)

        t_emb = self.time_mlp(self.time_embed(t))
        tokens = self.cond_embed(c).reshape(B, self.dims["n_tokens"], self.dims["token_dim"])

        h = self.in_proj(z)
        skips = []
        for i in _DOWN:
            h = self._run_stage(i, h, t_emb, tokens, mask)
            skips.append(h)
            h = self.down_proj[i](h)
        h = self._run_stage(_MID, h, t_emb, tokens, mask)
        for k, i in enumerate(_UP):
            h = self.up_proj[k](torch.cat([h, skips[2 - k]], dim=1))
            h = self._run_stage(i, h, t_emb, tokens, mask)
        v = self.out_proj(h)
        return Prediction(kind=PredictionKind.V, value=v)


def build_model(
    genome: ArchitectureGenome,
    num_conditions: int,
    seed: int = 0,
    data_dim: int = 2,
    **dims,
) -> ConditionalDenoiser:
    return ConditionalDenoiser(genome, num_conditions, data_dim=data_dim, seed=seed, **dims)


def clone_model(model: ConditionalDenoiser) -> ConditionalDenoiser:
    return copy.deepcopy(model)


def mutate(model: ConditionalDenoiser, action: Action) -> ConditionalDenoiser:
    """Apply one architecture edit, returning a new model.

    The input model is left untouched.  Every weight not involved in the edit
    is carried over bit for bit; an added block starts as an exact copy of the
    source block named by the action.
    """
    new_genome = apply_action(model.genome, action)
    new = ConditionalDenoiser(
        new_genome,
        model.num_conditions,
        data_dim=model.data_dim,
        seed=0,
        **model.dims,
    )
    old_state = model.state_dict()
    new_state = {}
    for name, tensor in new.state_dict().items():
        if not name.startswith("blocks."):
            new_state[name] = old_state[name]
            continue
        key, _, param = name[len("blocks.") :].partition(".")
        src_key = key
        stage_s, tag, idx_s = key.split("-")
        stage, idx = int(stage_s[1:]), int(idx_s)
        kind = BlockKind.RESNET if tag == "res" else BlockKind.CROSS_ATTENTION
        if stage == action.stage and kind is action.kind:
            if action.direction is ActionDirection.REMOVE and idx >= action.index:
                src_key = _block_key(stage, kind, idx + 1)
            elif (
                action.direction is ActionDirection.ADD
                and idx == new_genome.count(stage, kind) - 1
            ):
                src_key = _block_key(stage, kind, action.index)
        new_state[name] = old_state[f"blocks.{src_key}.{param}"]
    new.load_state_dict(new_state)
    return new


# ---------------------------------------------------------------------------
# checkpoints: portable arrays (.npz) + a YAML manifest


def save_checkpoint(
    model: ConditionalDenoiser,
    path: str | Path,
    *,
    seed: int = 0,
    schedule: str = "cosine",
    step: int = 0,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: p.detach().cpu().numpy() for name, p in model.state_dict().items()
    }
    np.savez(path.with_suffix(".npz"), **arrays)
    manifest = {
        "genome": model.genome.to_dict(),
        "num_conditions": model.num_conditions,
        "data_dim": model.data_dim,
        "dims": model.dims,
        "seed": seed,
        "schedule": schedule,
        "step": step,
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    return path.with_suffix(".npz")


def load_checkpoint(path: str | Path) -> tuple[ConditionalDenoiser, dict]:
    path = Path(path)
    manifest = yaml.safe_load(path.with_suffix(".yaml").read_text())
    genome = ArchitectureGenome.from_dict(manifest["genome"])
    model = ConditionalDenoiser(
        genome,
        manifest["num_conditions"],
        data_dim=manifest["data_dim"],
        **manifest["dims"],
    )
    blob = np.load(path.with_suffix(".npz"))
    state = {k: torch.from_numpy(blob[k]) for k in blob.files}
    model.load_state_dict(state)
    return model, manifest
