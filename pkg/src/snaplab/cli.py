"""Command-line entry points.

Every command reads a YAML config, validates it against an explicit schema
(unknown or ill-typed fields fail with the dotted field name), and writes its
artifacts into a fresh run directory:

    runs/<timestamp>-<name>/
        manifest.yaml      what ran, with the config and its hash
        metrics.csv        training log (step, loss, wallclock, seed)
        checkpoints/       model weights + genome manifests
        *.csv / *.png      metric tables and their plots, side by side

The run root is ``./runs`` unless SNAPLAB_RUNS_DIR says otherwise.  Usage
errors exit 2 (argparse), invalid configs exit 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import torch
import yaml

from .decoder import (
    DecoderDistillConfig,
    LatentPipeline,
    build_decoder,
    distill_decoder,
    prune_decoder,
)
from .distill import DistillConfig, DistillMode, GammaMode, distill
from .evaldata import (
    DEFAULT_W_GRID,
    eval_curve,
    make_conditional_mixture,
    train_probe,
)
from .evolve import (
    EvolveConfig,
    LatencyTable,
    ValSet,
    analytic_bench,
    build_latency_table,
    evolve,
    genome_latency,
    write_history_csv,
)
from .nets import (
    SkipConfig,
    build_model,
    clone_model,
    load_checkpoint,
    save_checkpoint,
    uniform_genome,
)
from .sampler import sample
from .schedule import make_schedule
from .trainer import TrainConfig, fit


class ConfigError(ValueError):
    """The config file is structurally valid YAML but fails the schema."""


# ---------------------------------------------------------------------------
# config plumbing


@dataclasses.dataclass(frozen=True)
class Opt:
    kind: object  # type, or (list, elem_type)
    default: object = None
    required: bool = False
    check: Optional[Callable[[object], Optional[str]]] = None


def _positive(v):
    return None if v > 0 else f"must be positive, got {v}"


def _nonnegative(v):
    return None if v >= 0 else f"must be >= 0, got {v}"


def _fraction(v):
    return None if 0.0 <= v <= 1.0 else f"must be in [0, 1], got {v}"


def _flatten(node, prefix=""):
    if isinstance(node, dict):
        for key, value in node.items():
            yield from _flatten(value, f"{prefix}{key}.")
    else:
        yield prefix[:-1], node


def _flatten_leaves(config: dict) -> dict:
    return dict(_flatten(config))


def _type_ok(value, kind) -> bool:
    if isinstance(kind, tuple) and kind[0] is list:
        return isinstance(value, list) and all(_type_ok(v, kind[1]) for v in value)
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, kind)


def validate_config(raw: dict, schema: dict[str, Opt]) -> dict:
    """Schema check with dotted field names; returns a nested config with
    defaults filled in.  Unknown fields are errors, not warnings: a typoed
    field that silently falls back to a default is how bad runs happen."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a mapping, got {type(raw).__name__}")
    leaves = _flatten_leaves(raw)
    for path in leaves:
        if path not in schema:
            raise ConfigError(f"unknown config field '{path}'")
    normalized: dict = {}
    for path, opt in schema.items():
        if path in leaves and leaves[path] is None:
            # explicit null means "use the default"
            if opt.required:
                raise ConfigError(f"missing required config field '{path}'")
            value = opt.default
        elif path in leaves:
            value = leaves[path]
            if not _type_ok(value, opt.kind):
                want = (
                    f"list of {opt.kind[1].__name__}"
                    if isinstance(opt.kind, tuple)
                    else opt.kind.__name__
                )
                raise ConfigError(f"field '{path}' must be {want}, got {value!r}")
            if opt.check is not None:
                message = opt.check(value)
                if message:
                    raise ConfigError(f"field '{path}' {message}")
            if opt.kind is float:
                value = float(value)
        elif opt.required:
            raise ConfigError(f"missing required config field '{path}'")
        else:
            value = opt.default
        node = normalized
        *parents, leaf = path.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return normalized


def config_hash(config: dict) -> str:
    dump = yaml.safe_dump(config, sort_keys=True)
    return hashlib.sha256(dump.encode()).hexdigest()[:16]


def load_config(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    raw = yaml.safe_load(p.read_text())
    return raw if raw is not None else {}


# ---------------------------------------------------------------------------
# run directories


def resolve_runs_dir(override: Optional[str] = None) -> Path:
    return Path(override or os.environ.get("SNAPLAB_RUNS_DIR", "runs"))


class RunDir:
    def __init__(self, root: Path, name: str, timestamp: bool = True):
        tag = f"{time.strftime('%Y%m%d-%H%M%S')}-{name}" if timestamp else name
        path = root / tag
        if timestamp:
            # two runs inside one second must not share a directory
            k = 2
            while path.exists():
                path = root / f"{tag}-{k}"
                k += 1
        self.path = path
        (self.path / "checkpoints").mkdir(parents=True, exist_ok=True)

    def write_manifest(self, manifest: dict) -> None:
        # tmp + rename so a crash can't leave a half-written manifest
        target = self.path / "manifest.yaml"
        tmp = target.with_suffix(".yaml.tmp")
        tmp.write_text(yaml.safe_dump(manifest, sort_keys=True))
        tmp.replace(target)

    def read_manifest(self) -> dict:
        return yaml.safe_load((self.path / "manifest.yaml").read_text())


def write_metrics_csv(
    path: Path, metrics: list[dict], seed: int, digest: str, stage: Optional[str] = None
) -> None:
    stage_col = ",stage" if stage is not None else ""
    lines = [f"# config_hash={digest}", f"step,loss,wallclock,seed{stage_col}"]
    for m in metrics:
        row = f"{m['step']},{m['loss']!r},{m['wallclock']!r},{seed}"
        lines.append(row + (f",{stage}" if stage is not None else ""))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# schemas

_DATA = {
    "data.num_conditions": Opt(int, 8, check=_positive),
    "data.radius": Opt(float, 4.0, check=_positive),
    "data.spread": Opt(float, 0.35, check=_positive),
    "data.seed": Opt(int, 0),
}

_MODEL = {
    "model.widths": Opt((list, int), [8, 12, 16]),
    "model.n_resnet": Opt(int, 1, check=_nonnegative),
    "model.n_attention": Opt(int, 1, check=_nonnegative),
    "model.seed": Opt(int, 0),
}

TRAIN_SCHEMA = {
    "name": Opt(str, "train"),
    "seed": Opt(int, 0),
    **_DATA,
    **_MODEL,
    "train.steps": Opt(int, 2000, check=_positive),
    "train.batch_size": Opt(int, 256, check=_positive),
    "train.learning_rate": Opt(float, 1e-3, check=_positive),
    "train.uncond_probability": Opt(float, 0.1, check=_fraction),
    "train.skip_probability": Opt(float, None),
}

DISTILL_SCHEMA = {
    "name": Opt(str, "distill"),
    "seed": Opt(int, 0),
    "teacher": Opt(str, required=True),
    **_DATA,
    "distill.teacher_steps": Opt(int, 16, check=_positive),
    "distill.student_steps": Opt(int, 8, check=_positive),
    "distill.mode": Opt(str, "direct"),
    "distill.gamma": Opt(float, 0.2, check=_nonnegative),
    "distill.gamma_mode": Opt(str, "dynamic"),
    "distill.cfg_probability": Opt(float, 0.1, check=_fraction),
    "distill.cfg_range": Opt((list, float), [2.0, 14.0]),
    "distill.steps": Opt(int, 2000, check=_positive),
    "distill.batch_size": Opt(int, 256, check=_positive),
    "distill.learning_rate": Opt(float, 1e-3, check=_positive),
    "distill.uncond_probability": Opt(float, 0.1, check=_fraction),
}

EVOLVE_SCHEMA = {
    "name": Opt(str, "evolve"),
    "seed": Opt(int, 0),
    "checkpoint": Opt(str, required=True),
    **_DATA,
    "latency.target_ms": Opt(float, None),
    "latency.target_ratio": Opt(float, 0.7, check=_fraction),
    "latency.table": Opt(str, None),
    "latency.analytic": Opt(bool, True),
    "latency.reps": Opt(int, 5, check=_positive),
    "evolve.rounds": Opt(int, 4, check=_positive),
    "evolve.group_size": Opt(int, 2, check=_positive),
    "evolve.train_steps_per_round": Opt(int, 100, check=_nonnegative),
    "evolve.eval_steps": Opt(int, 50, check=_positive),
    "evolve.cfg_scale": Opt(float, 7.5, check=_positive),
    "evolve.n_samples": Opt(int, 512, check=_positive),
    "evolve.batch_size": Opt(int, 128, check=_positive),
    "evolve.skip_probability": Opt(float, 0.9, check=_fraction),
}

SAMPLE_SCHEMA = {
    "name": Opt(str, "sample"),
    "seed": Opt(int, 0),
    "checkpoint": Opt(str, required=True),
    "sample.steps": Opt(int, 50, check=_positive),
    "sample.cfg_scale": Opt(float, 7.5, check=_nonnegative),
    "sample.condition": Opt(int, 0, check=_nonnegative),
    "sample.n_samples": Opt(int, 256, check=_positive),
}

BENCH_SCHEMA = {
    "name": Opt(str, "bench"),
    **_MODEL,
    "bench.reps": Opt(int, 5, check=_positive),
    "bench.analytic": Opt(bool, False),
    "bench.steps": Opt(int, 8, check=_positive),
}

DECODER_SCHEMA = {
    "name": Opt(str, "decoder"),
    "seed": Opt(int, 0),
    "decoder.widths": Opt((list, int), [64, 64, 32]),
    "decoder.prune_ratio": Opt(float, 0.5),
    "decoder.steps": Opt(int, 400, check=_positive),
    "decoder.batch_size": Opt(int, 16, check=_positive),
    "decoder.learning_rate": Opt(float, 1e-3, check=_positive),
    "decoder.pipeline_steps": Opt(int, 50, check=_positive),
    "decoder.num_conditions": Opt(int, 8, check=_positive),
    "decoder.heldout_n": Opt(int, 64, check=_positive),
}

CURVE_SCHEMA = {
    "name": Opt(str, "curve"),
    "seed": Opt(int, 0),
    "checkpoint": Opt(str, required=True),
    **_DATA,
    "eval.steps": Opt(int, 50, check=_positive),
    "eval.n_samples": Opt(int, 2048, check=_positive),
    "eval.w_grid": Opt((list, float), list(DEFAULT_W_GRID)),
    "eval.label": Opt(str, "curve"),
}

REPRODUCE_SCHEMA = {
    "name": Opt(str, "reproduce"),
    "seed": Opt(int, 0),
    **_DATA,
    **_MODEL,
    "train.steps": Opt(int, 600, check=_positive),
    "train.batch_size": Opt(int, 128, check=_positive),
    "train.learning_rate": Opt(float, 2e-3, check=_positive),
    "train.uncond_probability": Opt(float, 0.1, check=_fraction),
    "distill.steps": Opt(int, 300, check=_positive),
    "distill.batch_size": Opt(int, 128, check=_positive),
    "distill.learning_rate": Opt(float, 1e-3, check=_positive),
    "distill.gamma": Opt(float, 0.2, check=_nonnegative),
    "distill.cfg_probability": Opt(float, 0.1, check=_fraction),
    "distill.cfg_range": Opt((list, float), [2.0, 10.0]),
    "evolve.rounds": Opt(int, 2, check=_positive),
    "evolve.group_size": Opt(int, 2, check=_positive),
    "evolve.train_steps_per_round": Opt(int, 100, check=_nonnegative),
    "evolve.eval_steps": Opt(int, 8, check=_positive),
    "evolve.cfg_scale": Opt(float, 7.5, check=_positive),
    "evolve.n_samples": Opt(int, 128, check=_positive),
    "evolve.latency_ratio": Opt(float, 0.7, check=_fraction),
    "evolve.skip_probability": Opt(float, 0.9, check=_fraction),
    "eval.n_samples": Opt(int, 2048, check=_positive),
    "eval.w_grid": Opt((list, float), [1.0, 2.0, 3.0, 5.0, 7.5, 10.0]),
    "eval.base_steps": Opt(int, 50, check=_positive),
}


def _dataset_from(cfg: dict):
    d = cfg["data"]
    return make_conditional_mixture(
        num_conditions=d["num_conditions"],
        radius=d["radius"],
        spread=d["spread"],
        seed=d["seed"],
    )


def _model_from(cfg: dict, num_conditions: int):
    m = cfg["model"]
    if len(m["widths"]) != 3:
        raise ConfigError("field 'model.widths' must list three widths")
    genome = uniform_genome(tuple(m["widths"]), m["n_resnet"], m["n_attention"])
    return build_model(genome, num_conditions, seed=m["seed"])


def _enum_from(value: str, enum_cls, field: str):
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"field '{field}' must be one of: {choices}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = validate_config(load_config(args.config), TRAIN_SCHEMA)
    digest = config_hash(cfg)
    dataset = _dataset_from(cfg)
    model = _model_from(cfg, dataset.num_conditions)
    schedule = make_schedule()
    t = cfg["train"]
    skip = (
        SkipConfig(execute_probability=t["skip_probability"])
        if t["skip_probability"] is not None
        else None
    )
    train_cfg = TrainConfig(
        steps=t["steps"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        uncond_probability=t["uncond_probability"],
        skip=skip,
        seed=cfg["seed"],
    )
    model, metrics = fit(model, dataset, train_cfg, schedule)
    run = RunDir(resolve_runs_dir(args.runs_dir), cfg["name"])
    ckpt = save_checkpoint(
        model, run.path / "checkpoints" / "final", seed=cfg["seed"], step=t["steps"]
    )
    write_metrics_csv(run.path / "metrics.csv", metrics, cfg["seed"], digest)
    run.write_manifest(
        {
            "command": "train",
            "config": cfg,
            "config_hash": digest,
            "final_loss": metrics[-1]["loss"],
            "checkpoint": str(ckpt),
        }
    )
    print(f"run: {run.path}")
    print(f"final loss: {metrics[-1]['loss']:.6f}")
    return 0


def cmd_distill(args) -> int:
    cfg = validate_config(load_config(args.config), DISTILL_SCHEMA)
    digest = config_hash(cfg)
    teacher, _ = load_checkpoint(cfg["teacher"])
    dataset = _dataset_from(cfg)
    if dataset.num_conditions != teacher.num_conditions:
        raise ConfigError(
            f"field 'data.num_conditions' is {dataset.num_conditions} but the "
            f"teacher checkpoint has {teacher.num_conditions}"
        )
    d = cfg["distill"]
    if len(d["cfg_range"]) != 2:
        raise ConfigError("field 'distill.cfg_range' must be [low, high]")
    distill_cfg = DistillConfig(
        teacher_steps=d["teacher_steps"],
        student_steps=d["student_steps"],
        mode=_enum_from(d["mode"], DistillMode, "distill.mode"),
        gamma=d["gamma"],
        gamma_mode=_enum_from(d["gamma_mode"], GammaMode, "distill.gamma_mode"),
        cfg_probability=d["cfg_probability"],
        cfg_range=tuple(d["cfg_range"]),
        steps=d["steps"],
        batch_size=d["batch_size"],
        learning_rate=d["learning_rate"],
        uncond_probability=d["uncond_probability"],
        seed=cfg["seed"],
    )
    schedule = make_schedule()
    student, stages = distill(teacher, clone_model(teacher), dataset, distill_cfg, schedule)
    run = RunDir(resolve_runs_dir(args.runs_dir), cfg["name"])
    ckpt = save_checkpoint(
        student,
        run.path / "checkpoints" / "student",
        seed=cfg["seed"],
        extra={"student_steps": d["student_steps"]},
    )
    all_metrics = []
    for result in stages:
        stage = f"{result.teacher_steps}to{result.student_steps}"
        all_metrics += [dict(m, stage=stage) for m in result.metrics]
    lines = [f"# config_hash={digest}", "step,loss,wallclock,seed,stage"]
    for m in all_metrics:
        lines.append(f"{m['step']},{m['loss']!r},{m['wallclock']!r},{cfg['seed']},{m['stage']}")
    (run.path / "metrics.csv").write_text("\n".join(lines) + "\n")
    run.write_manifest(
        {
            "command": "distill",
            "config": cfg,
            "config_hash": digest,
            "stages": [[r.teacher_steps, r.student_steps] for r in stages],
            "checkpoint": str(ckpt),
        }
    )
    print(f"run: {run.path}")
    for result in stages:
        print(
            f"stage {result.teacher_steps} -> {result.student_steps}: "
            f"final loss {result.metrics[-1]['loss']:.6f}"
        )
    return 0


def cmd_evolve(args) -> int:
    cfg = validate_config(load_config(args.config), EVOLVE_SCHEMA)
    digest = config_hash(cfg)
    model, _ = load_checkpoint(cfg["checkpoint"])
    dataset = _dataset_from(cfg)
    schedule = make_schedule()
    lat = cfg["latency"]
    if lat["table"] is not None:
        table = LatencyTable.load(lat["table"])
    elif lat["analytic"]:
        table = build_latency_table(
            model.genome,
            bench=lambda kind, stage, width: analytic_bench(kind, stage, width, model.dims),
            reps=1,
        )
    else:
        table = build_latency_table(model.genome, reps=lat["reps"], dims=model.dims)
    start_ms = genome_latency(model.genome, table)
    target = lat["target_ms"] if lat["target_ms"] is not None else start_ms * lat["target_ratio"]
    probe = train_probe(dataset)
    e = cfg["evolve"]
    valset = ValSet(dataset=dataset, probe=probe, n_samples=e["n_samples"])
    evolve_cfg = EvolveConfig(
        rounds=e["rounds"],
        group_size=e["group_size"],
        train_steps_per_round=e["train_steps_per_round"],
        eval_steps=e["eval_steps"],
        cfg_scale=e["cfg_scale"],
        seed=cfg["seed"],
        batch_size=e["batch_size"],
        skip=SkipConfig(execute_probability=e["skip_probability"]),
    )
    evolved, history = evolve(
        model, valset, table, target, evolve_cfg, schedule=schedule, dataset=dataset
    )
    run = RunDir(resolve_runs_dir(args.runs_dir), cfg["name"])
    ckpt = save_checkpoint(evolved, run.path / "checkpoints" / "evolved", seed=cfg["seed"])
    table.save(run.path / "latency.csv")
    write_history_csv(run.path / "history.csv", history, cfg["seed"], digest)
    final_ms = genome_latency(evolved.genome, table)
    run.write_manifest(
        {
            "command": "evolve",
            "config": cfg,
            "config_hash": digest,
            "latency_before_ms": start_ms,
            "latency_after_ms": final_ms,
            "latency_target_ms": float(target),
            "rounds_run": len(history),
            "checkpoint": str(ckpt),
        }
    )
    print(f"run: {run.path}")
    print(f"latency: {start_ms:.3f} ms -> {final_ms:.3f} ms (target {target:.3f} ms)")
    return 0


def cmd_sample(args) -> int:
    cfg = validate_config(load_config(args.config), SAMPLE_SCHEMA)
    digest = config_hash(cfg)
    model, _ = load_checkpoint(cfg["checkpoint"])
    s = cfg["sample"]
    if s["condition"] >= model.num_conditions:
        raise ConfigError(
            f"field 'sample.condition' is {s['condition']} but the model has "
            f"{model.num_conditions} conditions"
        )
    draws = sample(
        model,
        make_schedule(),
        n_steps=s["steps"],
        condition=s["condition"],
        cfg_scale=s["cfg_scale"],
        seed=cfg["seed"],
        n_samples=s["n_samples"],
    )
    run = RunDir(resolve_runs_dir(args.runs_dir), cfg["name"])
    cols = ",".join(f"x{i}" for i in range(draws.shape[1]))
    lines = [f"# config_hash={digest}", f"{cols},condition,seed"]
    for row in draws.tolist():
        vals = ",".join(repr(v) for v in row)
        lines.append(f"{vals},{s['condition']},{cfg['seed']}")
    (run.path / "samples.csv").write_text("\n".join(lines) + "\n")
    run.write_manifest({"command": "sample", "config": cfg, "config_hash": digest})
    print(f"run: {run.path}")
    print(f"wrote {draws.shape[0]} samples")
    return 0


def cmd_bench(args) -> int:
    cfg = validate_config(load_config(args.config), BENCH_SCHEMA)
    digest = config_hash(cfg)
    m = cfg["model"]
    genome = uniform_genome(tuple(m["widths"]), m["n_resnet"], m["n_attention"])
    if cfg["bench"]["analytic"]:
        table = build_latency_table(
            genome, bench=lambda kind, stage, width: analytic_bench(kind, stage, width), reps=1
        )
    else:
        table = build_latency_table(genome, reps=cfg["bench"]["reps"])
    run = RunDir(resolve_runs_dir(args.runs_dir), cfg["name"])
    table.save(run.path / "latency.csv")
    per_step = genome_latency(genome, table)
    steps = cfg["bench"]["steps"]
    run.write_manifest(
        {
            "command": "bench",
            "config": cfg,
            "config_hash": digest,
            "per_step_ms": per_step,
            "loop_ms": per_step * steps,
        }
    )
    print(f"run: {run.path}")
    print(f"per-step latency: {per_step:.3f} ms; {steps}-step loop: {per_step * steps:.3f} ms")
    return 0


def cmd_decoder_distill(args) -> int:
    cfg = validate_config(load_config(args.config), DECODER_SCHEMA)
    digest = config_hash(cfg)
    d = cfg["decoder"]
    if len(d["widths"]) != 3:
        raise ConfigError("field 'decoder.widths' must list three widths")
    if not 0.0 < d["prune_ratio"] < 1.0:
        raise ConfigError(
            f"field 'decoder.prune_ratio' must be in (0, 1), got {d['prune_ratio']}"
        )
    teacher = build_decoder(tuple(d["widths"]), seed=cfg["seed"])
    student = prune_decoder(teacher, ratio=d["prune_ratio"], seed=cfg["seed"] + 1)
    pipeline = LatentPipeline(num_conditions=d["num_conditions"], n_steps=d["pipeline_steps"])
    student, report = distill_decoder(
        teacher,
        student,
        pipeline,
        DecoderDistillConfig(
            steps=d["steps"],
            batch_size=d["batch_size"],
            learning_rate=d["learning_rate"],
            seed=cfg["seed"],
            heldout_n=d["heldout_n"],
        ),
    )
    run = RunDir(resolve_runs_dir(args.runs_dir), cfg["name"])
    torch.save(student.state_dict(), run.path / "checkpoints" / "decoder.pt")
    run.write_manifest(
        {
            "command": "decoder-distill",
            "config": cfg,
            "config_hash": digest,
            "param_ratio": report["param_ratio"],
            "undistilled_mse": report["undistilled_mse"],
            "distilled_mse": report["distilled_mse"],
            "mse_ratio": report["mse_ratio"],
        }
    )
    print(f"run: {run.path}")
    print(
        f"param ratio {report['param_ratio']:.4f}; heldout MSE "
        f"{report['undistilled_mse']:.6f} -> {report['distilled_mse']:.6f}"
    )
    return 0


def cmd_eval_curve(args) -> int:
    cfg = validate_config(load_config(args.config), CURVE_SCHEMA)
    digest = config_hash(cfg)
    model, _ = load_checkpoint(cfg["checkpoint"])
    dataset = _dataset_from(cfg)
    probe = train_probe(dataset)
    run = RunDir(resolve_runs_dir(args.runs_dir), cfg["name"])
    e = cfg["eval"]
    points = eval_curve(
        model,
        make_schedule(),
        dataset,
        probe,
        steps=e["steps"],
        w_list=e["w_grid"],
        n_samples=e["n_samples"],
        seed=cfg["seed"],
        out_dir=run.path,
        config_hash=digest,
        label=e["label"],
    )
    run.write_manifest(
        {
            "command": "eval-curve",
            "config": cfg,
            "config_hash": digest,
            "csv": str(run.path / f"{e['label']}.csv"),
        }
    )
    print(f"run: {run.path}")
    for p in points:
        print(f"w={p.w:g}: dist={p.dist:.4f} consistency={p.consistency:.4f}")
    return 0


# ---------------------------------------------------------------------------
# the full reproduction chain


def reproduce_pipeline(cfg: dict, out_dir: Path, resume: bool = False) -> dict:
    """Train, distill, evolve, distill again, and sweep guidance scales.

    Stages write named artifacts into ``out_dir``; with resume=True a stage
    whose artifacts already exist is skipped, so an interrupted run picks up
    where it stopped.  Latency uses the analytic cost proxy, keeping every
    stage (and so every curve CSV) a deterministic function of the config.
    """
    digest = config_hash(cfg)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    dataset = _dataset_from(cfg)
    schedule = make_schedule()
    probe = train_probe(dataset)
    seed = cfg["seed"]
    status: dict[str, dict] = {}

    def stage(name: str, artifacts: list[Path], build: Callable[[], None]) -> None:
        if resume and all(p.exists() for p in artifacts):
            status[name] = {"skipped": True, "artifacts": [str(p) for p in artifacts]}
            return
        build()
        missing = [str(p) for p in artifacts if not p.exists()]
        if missing:
            raise RuntimeError(f"stage '{name}' did not produce {missing}")
        status[name] = {"skipped": False, "artifacts": [str(p) for p in artifacts]}

    base_ckpt = ckpt_dir / "base.npz"
    big16_ckpt = ckpt_dir / "big16.npz"
    efficient_ckpt = ckpt_dir / "efficient.npz"
    eff16_ckpt = ckpt_dir / "efficient16.npz"
    eff8_ckpt = ckpt_dir / "efficient8.npz"

    def build_base():
        model = _model_from(cfg, dataset.num_conditions)
        t = cfg["train"]
        model, metrics = fit(
            model,
            dataset,
            TrainConfig(
                steps=t["steps"],
                batch_size=t["batch_size"],
                learning_rate=t["learning_rate"],
                uncond_probability=t["uncond_probability"],
                seed=seed,
            ),
            schedule,
        )
        save_checkpoint(model, base_ckpt, seed=seed, step=t["steps"])
        write_metrics_csv(out_dir / "metrics_base.csv", metrics, seed, digest)

    stage("base", [base_ckpt], build_base)

    d = cfg["distill"]

    def distill_cfg(teacher_steps, student_steps, cfg_probability, stage_seed):
        return DistillConfig(
            teacher_steps=teacher_steps,
            student_steps=student_steps,
            cfg_probability=cfg_probability,
            cfg_range=tuple(d["cfg_range"]),
            gamma=d["gamma"],
            steps=d["steps"],
            batch_size=d["batch_size"],
            learning_rate=d["learning_rate"],
            seed=stage_seed,
        )

    def build_big16():
        teacher, _ = load_checkpoint(base_ckpt)
        student, _ = distill(
            teacher,
            clone_model(teacher),
            dataset,
            distill_cfg(32, 16, cfg_probability=0.0, stage_seed=seed + 1),
            schedule,
        )
        save_checkpoint(student, big16_ckpt, seed=seed + 1, extra={"student_steps": 16})

    stage("big16", [big16_ckpt], build_big16)

    e = cfg["evolve"]
    history_csv = out_dir / "evolve_history.csv"
    latency_csv = out_dir / "latency.csv"

    def build_efficient():
        model, _ = load_checkpoint(base_ckpt)
        table = build_latency_table(
            model.genome,
            bench=lambda kind, stage_i, width: analytic_bench(kind, stage_i, width, model.dims),
            reps=1,
        )
        target = genome_latency(model.genome, table) * e["latency_ratio"]
        evolved, history = evolve(
            model,
            ValSet(dataset=dataset, probe=probe, n_samples=e["n_samples"]),
            table,
            target,
            EvolveConfig(
                rounds=e["rounds"],
                group_size=e["group_size"],
                train_steps_per_round=e["train_steps_per_round"],
                eval_steps=e["eval_steps"],
                cfg_scale=e["cfg_scale"],
                seed=seed + 2,
                batch_size=cfg["train"]["batch_size"],
                skip=SkipConfig(execute_probability=e["skip_probability"]),
            ),
            schedule=schedule,
            dataset=dataset,
        )
        save_checkpoint(evolved, efficient_ckpt, seed=seed + 2)
        table.save(latency_csv)
        write_history_csv(history_csv, history, seed + 2, digest)

    stage("evolve", [efficient_ckpt, history_csv, latency_csv], build_efficient)

    def build_eff16():
        teacher, _ = load_checkpoint(efficient_ckpt)
        student, _ = distill(
            teacher,
            clone_model(teacher),
            dataset,
            distill_cfg(32, 16, cfg_probability=0.0, stage_seed=seed + 3),
            schedule,
        )
        save_checkpoint(student, eff16_ckpt, seed=seed + 3, extra={"student_steps": 16})

    stage("efficient16", [eff16_ckpt], build_eff16)

    def build_eff8():
        # guidance-aware stage: the strong 16-step model teaches the
        # efficient student to jump 16 -> 8 under sampled guidance scales
        teacher, _ = load_checkpoint(big16_ckpt)
        student_init, _ = load_checkpoint(eff16_ckpt)
        student, _ = distill(
            teacher,
            student_init,
            dataset,
            distill_cfg(16, 8, cfg_probability=d["cfg_probability"], stage_seed=seed + 4),
            schedule,
        )
        save_checkpoint(student, eff8_ckpt, seed=seed + 4, extra={"student_steps": 8})

    stage("efficient8", [eff8_ckpt], build_eff8)

    ev = cfg["eval"]
    curve_specs = [
        ("base_50", base_ckpt, ev["base_steps"]),
        ("efficient_16", eff16_ckpt, 16),
        ("efficient_8", eff8_ckpt, 8),
    ]
    curve_csvs = [out_dir / f"{label}.csv" for label, _, _ in curve_specs]

    def build_curves():
        for label, ckpt, steps in curve_specs:
            model, _ = load_checkpoint(ckpt)
            eval_curve(
                model,
                schedule,
                dataset,
                probe,
                steps=steps,
                w_list=ev["w_grid"],
                n_samples=ev["n_samples"],
                seed=seed,
                out_dir=out_dir,
                config_hash=digest,
                label=label,
            )

    stage("curves", curve_csvs, build_curves)

    manifest = {
        "command": "reproduce",
        "config": cfg,
        "config_hash": digest,
        "stages": status,
        "curves": [str(p) for p in curve_csvs],
    }
    tmp = out_dir / "manifest.yaml.tmp"
    tmp.write_text(yaml.safe_dump(manifest, sort_keys=True))
    tmp.replace(out_dir / "manifest.yaml")
    return status


def cmd_reproduce(args) -> int:
    cfg = validate_config(load_config(args.config), REPRODUCE_SCHEMA)
    out_dir = resolve_runs_dir(args.runs_dir) / cfg["name"]
    status = reproduce_pipeline(cfg, out_dir, resume=args.resume)
    print(f"run: {out_dir}")
    for name, record in status.items():
        tag = "skipped" if record["skipped"] else "built"
        print(f"stage {name}: {tag}")
    return 0


# ---------------------------------------------------------------------------
# dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snaplab",
        description="A desk-scale lab for few-step conditional diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": (cmd_train, "train a conditional denoiser"),
        "distill": (cmd_distill, "compress sampling steps against a teacher"),
        "evolve": (cmd_evolve, "search block edits under a latency target"),
        "sample": (cmd_sample, "draw samples from a checkpoint"),
        "bench": (cmd_bench, "build a per-block latency table"),
        "decoder-distill": (cmd_decoder_distill, "prune and distill the image decoder"),
        "eval-curve": (cmd_eval_curve, "sweep guidance scales for one checkpoint"),
        "reproduce": (cmd_reproduce, "run the whole chain from scratch"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="YAML config file")
        p.add_argument("--runs-dir", default=None, help="override the run root")
        if name == "reproduce":
            p.add_argument(
                "--resume", action="store_true", help="skip stages whose artifacts exist"
            )
        p.set_defaults(fn=fn)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
