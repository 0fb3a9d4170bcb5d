"""Desk-scale backdoor laboratory: trigger implanting, reconstructive
unlearn/recover/prune defense, ablations, and auxiliary detection tasks."""

__version__ = "0.1.0"

from .data import Dataset, PoisonPolicy, TriggerSpec
from .masks import UnitMask
from .model import ModelSpec, ParameterStore, build_model, small_convnet, tiny_convnet
from .nets import Batch, apply_filter_mask, forward, loss_and_grads, sgd_step
from .rnp import (
    ExperimentReport,
    PruneConfig,
    RecoverConfig,
    UnlearnConfig,
    infer_backdoor_label,
    prune_fraction,
    prune_threshold,
    recover,
    run_pipeline,
    select_dynamic_threshold,
    unlearn,
)
from .train import Metrics, TrainConfig, accuracy, attack_metrics, train

__all__ = [
    "Batch",
    "Dataset",
    "ExperimentReport",
    "Metrics",
    "ModelSpec",
    "ParameterStore",
    "PoisonPolicy",
    "PruneConfig",
    "RecoverConfig",
    "TrainConfig",
    "TriggerSpec",
    "UnitMask",
    "UnlearnConfig",
    "accuracy",
    "apply_filter_mask",
    "attack_metrics",
    "build_model",
    "forward",
    "infer_backdoor_label",
    "loss_and_grads",
    "prune_fraction",
    "prune_threshold",
    "recover",
    "run_pipeline",
    "select_dynamic_threshold",
    "sgd_step",
    "small_convnet",
    "tiny_convnet",
    "train",
    "unlearn",
]
