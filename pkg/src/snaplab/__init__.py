"""Desk-scale lab for few-step conditional diffusion.

Everything runs on CPU in minutes: tiny conditional denoisers over
Gaussian-mixture data, exact Bayes oracles to check the math, DDIM sampling
with classifier-free guidance, two flavors of step distillation, a
latency-driven architecture search, and a pruned-decoder distillation path.
"""

__version__ = "0.1.0"

from .schedule import (
    CosineSchedule,
    LatentState,
    Prediction,
    PredictionKind,
    SingularityError,
    convert,
    diffuse,
    make_schedule,
    v_from_x_eps,
)
from .sampler import (
    BayesDenoiser,
    GaussianMixture,
    cfg_combine,
    ddim_step,
    sample,
)
from .evaldata import (
    ConditionalDataset,
    ConsistencyProbe,
    condition_consistency,
    distribution_distance,
    eval_curve,
    make_conditional_mixture,
    make_latent_mixture,
    train_probe,
)
from .nets import (
    Action,
    ActionDirection,
    ArchitectureGenome,
    BlockKind,
    ConditionalDenoiser,
    SkipConfig,
    StageSpec,
    build_model,
    clone_model,
    load_checkpoint,
    mutate,
    save_checkpoint,
    uniform_genome,
)
from .trainer import TrainConfig, TrainingDiverged, denoise_loss, fit
from .distill import (
    DistillConfig,
    DistillMode,
    GammaMode,
    cfg_dstl_loss,
    compare_pipelines,
    distill,
    heldout_distill_mse,
    snr_weight,
    total_loss,
    vanilla_dstl_loss,
    vanilla_target,
)
from .evolve import (
    ActionScore,
    EvolveConfig,
    LatencyTable,
    UnreachableTargetError,
    ValSet,
    build_latency_table,
    evaluate_action,
    evolve,
    genome_latency,
)
from .decoder import (
    ImageDecoder,
    LatentPipeline,
    build_decoder,
    distill_decoder,
    prune_decoder,
)

__all__ = [
    "Action",
    "ActionDirection",
    "ActionScore",
    "ArchitectureGenome",
    "BayesDenoiser",
    "BlockKind",
    "ConditionalDataset",
    "ConditionalDenoiser",
    "ConsistencyProbe",
    "CosineSchedule",
    "DistillConfig",
    "DistillMode",
    "EvolveConfig",
    "GammaMode",
    "GaussianMixture",
    "ImageDecoder",
    "LatencyTable",
    "LatentPipeline",
    "LatentState",
    "Prediction",
    "PredictionKind",
    "SingularityError",
    "SkipConfig",
    "StageSpec",
    "TrainConfig",
    "TrainingDiverged",
    "UnreachableTargetError",
    "ValSet",
    "build_decoder",
    "build_latency_table",
    "build_model",
    "cfg_combine",
    "cfg_dstl_loss",
    "clone_model",
    "compare_pipelines",
    "condition_consistency",
    "convert",
    "ddim_step",
    "denoise_loss",
    "diffuse",
    "distill",
    "distill_decoder",
    "distribution_distance",
    "eval_curve",
    "evaluate_action",
    "evolve",
    "fit",
    "genome_latency",
    "heldout_distill_mse",
    "load_checkpoint",
    "make_conditional_mixture",
    "make_latent_mixture",
    "make_schedule",
    "mutate",
    "prune_decoder",
    "sample",
    "save_checkpoint",
    "snr_weight",
    "total_loss",
    "train_probe",
    "uniform_genome",
    "v_from_x_eps",
    "vanilla_dstl_loss",
    "vanilla_target",
    "__version__",
]
