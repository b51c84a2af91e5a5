"""Diffusion models on the natural numbers.

Counts are noised by binomial thinning and regenerated by a learned
birth-death reverse process. The package provides the schedules, the exact
kernels and small-state-space oracles, a numpy MLP predictor, samplers for
generation and RePaint imputation, a negative-binomial toy generator and
two-sample metrics.
"""

from .kernel import (
    attrition_step,
    enumerate_reverse_chain,
    forward_sample,
    guide,
    make_rng,
    random_round,
    spawn_rngs,
)
from .metrics import MetricReport, evaluate, rbf_mmd, sliced_wasserstein, wasserstein1_1d
from .predictor import Predictor, TrainConfig, load_checkpoint, predict, save_checkpoint, train
from .sampler import (
    MCAR,
    Attrition,
    MissingnessMask,
    MnarLowBiased,
    SamplerConfig,
    generate,
    make_mask,
    repaint_impute,
)
from .schedule import PSchedule, ScheduleKind, WeightKind, WeightSpec, beta, p_of, sigma_max, weight
from .synth import NegBinSpec, load_counts, sample_dataset, save_counts

__version__ = "0.1.0"

__all__ = [
    "Attrition", "MCAR", "MetricReport", "MissingnessMask", "MnarLowBiased", "NegBinSpec",
    "PSchedule", "Predictor", "SamplerConfig", "ScheduleKind", "TrainConfig", "WeightKind",
    "WeightSpec", "attrition_step", "beta", "enumerate_reverse_chain", "evaluate",
    "forward_sample", "generate", "guide", "load_checkpoint", "load_counts", "make_mask",
    "make_rng", "p_of", "predict", "random_round", "rbf_mmd", "repaint_impute",
    "sample_dataset", "save_checkpoint", "save_counts", "sigma_max", "sliced_wasserstein",
    "spawn_rngs", "train", "wasserstein1_1d", "weight",
]
