"""Multi-view feature learning lab: synthetic data, patch networks, adversarial
training with clean-teacher distillation, and the probes that explain them."""

from ._runtime import tune_allocator
from .attacks import AttackConfig, attack_batch, fgsm, pgd
from .autodiff import Tensor, backward, finite_diff_grad, kl_divergence, softmax_temp
from .data import DistributionConfig, Dataset, FeatureBank, build_feature_bank, sample_dataset, sample_simplified
from .error_model import ErrorModelParams, finite_n_oracle, incentive_gap, report
from .patchnet import LossSpec, ModelArch, ModelParams, composite_loss, forward, init_model
from .probes import feature_alignment, mixture_mass, perturbation_alignment, training_errors
from .trainers import MetricsRecord, TrainConfig, evaluate, run_preset, train_clean, train_student

__all__ = [
    "AttackConfig", "attack_batch", "fgsm", "pgd",
    "Tensor", "backward", "finite_diff_grad", "kl_divergence", "softmax_temp",
    "DistributionConfig", "Dataset", "FeatureBank", "build_feature_bank", "sample_dataset", "sample_simplified",
    "ErrorModelParams", "finite_n_oracle", "incentive_gap", "report",
    "LossSpec", "ModelArch", "ModelParams", "composite_loss", "forward", "init_model",
    "feature_alignment", "mixture_mass", "perturbation_alignment", "training_errors",
    "MetricsRecord", "TrainConfig", "evaluate", "run_preset", "train_clean", "train_student",
]
__version__ = "0.1.0"

tune_allocator()
