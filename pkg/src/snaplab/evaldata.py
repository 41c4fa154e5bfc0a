"""Conditional toy datasets and the two evaluation metrics.

Quality is measured with stand-ins that are exact at desk scale:

* ``distribution_distance`` -- sliced 1-Wasserstein between equally sized
  sample sets, averaged over a fixed bank of random projections.
* ``condition_consistency`` -- mean probability a frozen linear probe
  assigns to the intended condition.  The probe is trained once on real
  data and checksummed; a mutated probe is rejected.

``eval_curve`` sweeps the guidance scale and records (distance,
consistency) pairs, the desk-scale analogue of a fidelity/alignment
tradeoff plot.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from pathlib import Path

import numpy as np
import torch

from .sampler import GaussianMixture, merge_mixtures, sample
from .schedule import CosineSchedule


class ProbeIntegrityError(RuntimeError):
    """The consistency probe's parameters changed after training."""


def _child_seed(*parts: int) -> int:
    h = hashlib.sha256(("/".join(str(p) for p in parts)).encode()).digest()
    return int.from_bytes(h[:4], "little")


class ConditionalDataset:
    """A labeled generative problem: one Gaussian mixture per condition."""

    def __init__(self, mixtures: dict[int, GaussianMixture], seed: int = 0):
        self.mixtures = dict(mixtures)
        self.num_conditions = len(self.mixtures)
        if sorted(self.mixtures) != list(range(self.num_conditions)):
            raise ValueError("conditions must be labeled 0..K-1")
        dims = {m.dim for m in self.mixtures.values()}
        if len(dims) != 1:
            raise ValueError("all conditions must share a data dimension")
        (self.data_dim,) = dims
        self.seed = seed

    def pooled(self) -> GaussianMixture:
        return merge_mixtures([self.mixtures[k] for k in range(self.num_conditions)])

    def sample_condition(
        self, condition: int, n: int, generator: torch.Generator
    ) -> torch.Tensor:
        return self.mixtures[condition].sample(n, generator)

    def sample_batch(
        self, n: int, generator: torch.Generator, dtype=torch.float32
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Random-condition training batch (x, c)."""
        c = torch.randint(self.num_conditions, (n,), generator=generator)
        x = torch.empty(n, self.data_dim, dtype=torch.float64)
        for label in range(self.num_conditions):
            rows = c == label
            k = int(rows.sum())
            if k:
                x[rows] = self.mixtures[label].sample(k, generator)
        return x.to(dtype), c

    def draw(self, condition: int, index: int) -> torch.Tensor:
        """A reproducible single draw, addressable by (condition, index)."""
        g = torch.Generator().manual_seed(_child_seed(self.seed, condition, index))
        return self.mixtures[condition].sample(1, g).squeeze(0)

    def balanced_conditions(self, n: int) -> torch.Tensor:
        return torch.arange(n, dtype=torch.long) % self.num_conditions

    def reference_sample(
        self, n: int, seed: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Balanced ground-truth draws for metric baselines."""
        c = self.balanced_conditions(n)
        g = torch.Generator().manual_seed(_child_seed(self.seed, 1, seed))
        x = torch.empty(n, self.data_dim, dtype=torch.float64)
        for label in range(self.num_conditions):
            rows = c == label
            x[rows] = self.mixtures[label].sample(int(rows.sum()), g)
        return x, c


def make_conditional_mixture(
    num_conditions: int = 8,
    radius: float = 4.0,
    spread: float = 0.35,
    seed: int = 0,
) -> ConditionalDataset:
    """The default 2-D problem: class means on a circle, isotropic spread."""
    mixtures = {}
    for k in range(num_conditions):
        angle = 2 * math.pi * k / num_conditions
        mean = torch.tensor([[radius * math.cos(angle), radius * math.sin(angle)]])
        mixtures[k] = GaussianMixture(
            weights=torch.tensor([1.0]),
            means=mean,
            variances=torch.full((1, 2), spread**2),
        )
    return ConditionalDataset(mixtures, seed=seed)


def make_latent_mixture(
    num_conditions: int = 8,
    shape: tuple[int, int, int] = (4, 8, 8),
    spread: float = 0.15,
    seed: int = 0,
) -> ConditionalDataset:
    """Per-condition Gaussians over a flattened latent grid.

    Means are smooth low-frequency fields (coarse noise upsampled bilinearly)
    so the latent manifold resembles what a small denoiser would emit, without
    needing one trained.
    """
    c, h, w = shape
    dim = c * h * w
    g = torch.Generator().manual_seed(seed)
    mixtures = {}
    for k in range(num_conditions):
        coarse = torch.randn(1, c, 2, 2, generator=g, dtype=torch.float64)
        field = torch.nn.functional.interpolate(
            coarse, size=(h, w), mode="bilinear", align_corners=True
        )
        mixtures[k] = GaussianMixture(
            weights=torch.tensor([1.0]),
            means=field.reshape(1, dim),
            variances=torch.full((1, dim), spread**2),
        )
    return ConditionalDataset(mixtures, seed=seed)


def shape_image(condition: int, size: int = 32, jitter: float = 0.0, seed: int = 0) -> torch.Tensor:
    """Procedural (3, size, size) image for a condition: a filled disk whose
    position and hue are set by the label.  Handy as a decoder target."""
    g = torch.Generator().manual_seed(_child_seed(seed, condition, int(jitter * 1e6)))
    angle = 2 * math.pi * condition / 8
    cx = size / 2 + size / 4 * math.cos(angle) + jitter * float(torch.randn(1, generator=g))
    cy = size / 2 + size / 4 * math.sin(angle) + jitter * float(torch.randn(1, generator=g))
    yy, xx = torch.meshgrid(
        torch.arange(size, dtype=torch.float64),
        torch.arange(size, dtype=torch.float64),
        indexing="ij",
    )
    disk = ((xx - cx) ** 2 + (yy - cy) ** 2 <= (size / 6) ** 2).to(torch.float64)
    hue = torch.tensor(
        [math.cos(angle) * 0.5 + 0.5, math.sin(angle) * 0.5 + 0.5, 0.7]
    )
    return hue[:, None, None] * disk.unsqueeze(0)


# ---------------------------------------------------------------------------
# distribution distance


def distribution_distance(
    a: torch.Tensor,
    b: torch.Tensor,
    n_projections: int = 256,
    seed: int = 0,
    min_samples: int = 1000,
) -> float:
    """Sliced 1-Wasserstein distance between two equally sized sample sets.

    Projections are drawn once from a fixed seed so the metric is a
    deterministic function of its inputs.  Requires at least ``min_samples``
    points per set; fewer makes the estimate too noisy to act on.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"expected (n, d) sample sets, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ValueError("sample sets must have equal size")
    if a.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples per set, got {a.shape[0]}")
    g = torch.Generator().manual_seed(seed)
    proj = torch.randn(n_projections, a.shape[1], generator=g, dtype=torch.float64)
    proj = proj / proj.norm(dim=1, keepdim=True)
    pa = (a @ proj.T).sort(dim=0).values
    pb = (b @ proj.T).sort(dim=0).values
    return float((pa - pb).abs().mean())


# ---------------------------------------------------------------------------
# consistency probe


class ConsistencyProbe:
    """Frozen linear softmax classifier over conditions."""

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor):
        self.weight = weight.detach().clone().to(torch.float64)
        self.bias = bias.detach().clone().to(torch.float64)
        self.checksum = self._digest()

    def _digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.weight.numpy().tobytes())
        h.update(self.bias.numpy().tobytes())
        return h.hexdigest()

    def verify(self) -> None:
        if self._digest() != self.checksum:
            raise ProbeIntegrityError("probe parameters changed since training")

    @property
    def num_conditions(self) -> int:
        return self.weight.shape[0]

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        self.verify()
        x = torch.as_tensor(x, dtype=torch.float64)
        return torch.softmax(x @ self.weight.T + self.bias, dim=1)

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            weight=self.weight.numpy(),
            bias=self.bias.numpy(),
            checksum=np.array(self.checksum),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ConsistencyProbe":
        blob = np.load(path, allow_pickle=False)
        probe = cls(torch.from_numpy(blob["weight"]), torch.from_numpy(blob["bias"]))
        if probe.checksum != str(blob["checksum"]):
            raise ProbeIntegrityError(f"stored probe at {path} fails its checksum")
        return probe


def train_probe(
    dataset: ConditionalDataset,
    n_train: int = 4096,
    steps: int = 400,
    lr: float = 0.05,
    seed: int = 0,
) -> ConsistencyProbe:
    """Fit the linear probe once on real draws; the result is frozen."""
    g = torch.Generator().manual_seed(_child_seed(dataset.seed, 2, seed))
    x, c = dataset.sample_batch(n_train, g, dtype=torch.float64)
    lin = torch.nn.Linear(dataset.data_dim, dataset.num_conditions, dtype=torch.float64)
    with torch.no_grad():
        lin.weight.uniform_(-0.1, 0.1, generator=g)
        lin.bias.zero_()
    opt = torch.optim.Adam(lin.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(lin(x), c)
        loss.backward()
        opt.step()
    return ConsistencyProbe(lin.weight, lin.bias)


def condition_consistency(
    samples: torch.Tensor, conditions: torch.Tensor, probe: ConsistencyProbe
) -> float:
    """Mean probe probability of each sample's intended condition."""
    conditions = torch.as_tensor(conditions, dtype=torch.long)
    if samples.shape[0] != conditions.shape[0]:
        raise ValueError("one condition per sample required")
    probs = probe.probabilities(samples)
    return float(probs[torch.arange(len(conditions)), conditions].mean())


# ---------------------------------------------------------------------------
# tradeoff curves


@dataclasses.dataclass(frozen=True)
class TradeoffPoint:
    w: float
    dist: float
    consistency: float


DEFAULT_W_GRID = tuple(1.0 + 0.5 * i for i in range(19))  # 1.0 .. 10.0


def eval_curve(
    model,
    schedule: CosineSchedule,
    dataset: ConditionalDataset,
    probe: ConsistencyProbe,
    steps: int,
    w_list=DEFAULT_W_GRID,
    n_samples: int = 2048,
    seed: int = 0,
    out_dir: str | Path | None = None,
    config_hash: str = "",
    label: str = "curve",
) -> list[TradeoffPoint]:
    """Sweep guidance scales; optionally write ``<label>.csv`` and a plot."""
    reference, _ = dataset.reference_sample(n_samples, seed)
    conditions = dataset.balanced_conditions(n_samples)
    points = []
    for i, w in enumerate(w_list):
        draws = sample(
            model,
            schedule,
            n_steps=steps,
            condition=conditions,
            cfg_scale=float(w),
            seed=_child_seed(seed, 3, i),
            n_samples=n_samples,
        )
        points.append(
            TradeoffPoint(
                w=float(w),
                dist=distribution_distance(draws.to(torch.float64), reference),
                consistency=condition_consistency(draws, conditions, probe),
            )
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_curve_csv(out_dir / f"{label}.csv", points, steps, n_samples, seed, config_hash)
        _plot_curve(out_dir / f"{label}.png", points, label)
    return points


def write_curve_csv(
    path: str | Path,
    points: list[TradeoffPoint],
    steps: int,
    n_samples: int,
    seed: int,
    config_hash: str = "",
) -> None:
    lines = [f"# config_hash={config_hash}", "w,dist,consistency,steps,n_samples,seed"]
    for p in points:
        lines.append(f"{p.w!r},{p.dist!r},{p.consistency!r},{steps},{n_samples},{seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve_csv(path: str | Path) -> list[TradeoffPoint]:
    points = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("w,"):
            continue
        w, dist, cons, *_ = line.split(",")
        points.append(TradeoffPoint(float(w), float(dist), float(cons)))
    return points


def _plot_curve(path: Path, points: list[TradeoffPoint], label: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([p.dist for p in points], [p.consistency for p in points], "o-")
    for p in points[:: max(1, len(points) // 6)]:
        ax.annotate(f"w={p.w:g}", (p.dist, p.consistency), fontsize=7)
    ax.set_xlabel("distribution distance")
    ax.set_ylabel("condition consistency")
    ax.set_title(label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
