"""Controlled variants of the defense: granularity matrix, necessity
baselines, and the dormant-activation pruning comparison."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, iter_batches
from .masks import GRANULARITY_FILTER, GRANULARITY_NEURON, UnitMask, ones_mask
from .model import ModelSpec, ParameterStore
from .nets import (
    NumericError,
    apply_filter_mask,
    apply_neuron_mask,
    emit_feature_maps,
    forward_torch,
    store_from_torch,
    torch_params,
)
from .rnp import (
    PruneConfig,
    RecoverConfig,
    UnlearnConfig,
    prune_threshold,
    prune_threshold_neuron,
    recover,
    select_dynamic_threshold,
    unlearn,
)
from .train import Metrics, accuracy, attack_metrics, predict_labels

VARIANT_IDS = (
    "NU-FR",
    "NU-NR",
    "FU-FR",
    "FU-NR",
    "prune-wo-recover",
    "recover-wo-unlearn",
    "learn-incorrect",
    "fine-pruning",
)


@dataclass
class AblationReport:
    variant: str
    metrics_before: Metrics
    metrics_after: Metrics
    pruned_count: int
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANT_IDS:
            raise ValueError(f"unknown ablation variant {self.variant!r}")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "metrics_before": self.metrics_before.to_dict(),
            "metrics_after": self.metrics_after.to_dict(),
            "pruned_count": self.pruned_count,
            "notes": self.notes,
        }


@dataclass
class FilterUnlearnResult:
    params: ParameterStore  # mask baked into the input weights
    mask: UnitMask
    epochs_used: int
    ca_trace: list[float]
    reached_ca_min: bool


def filter_unlearn(
    spec: ModelSpec, params: ParameterStore, defense: Dataset, cfg: UnlearnConfig
) -> FilterUnlearnResult:
    """Gradient ascent on a per-filter mask over frozen weights (no decay on
    the mask), clipped to [0,1] each step, same stop rule as full unlearning.
    The final mask is baked into a copy of the weights."""
    if len(defense) == 0:
        raise ValueError("defense set is empty")
    ca_min = cfg.resolve_ca_min(spec.num_classes)
    mask = ones_mask(spec, GRANULARITY_FILTER)
    t = torch_params(params)
    mv = torch.from_numpy(mask.values.copy()).requires_grad_(True)

    ca_trace: list[float] = []
    epochs_used = 0
    reached = False
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([0xD5, epoch]).permutation(len(defense))
        for batch in iter_batches(defense, cfg.batch_size, order):
            x = torch.from_numpy(batch.images)
            y = torch.from_numpy(batch.labels)
            if mv.grad is not None:
                mv.grad = None
            logits = forward_torch(spec, t, x, training=False, mask=mask, mask_values=mv)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(f"filter unlearning diverged at epoch {epoch}")
            loss.backward()
            with torch.no_grad():
                mv.add_(mv.grad, alpha=cfg.lr)
                mv.clamp_(0.0, 1.0)
        epochs_used = epoch + 1
        ca = _masked_defense_accuracy(spec, t, mask, mv, defense, cfg.batch_size)
        ca_trace.append(ca)
        if ca <= ca_min:
            reached = True
            break

    out_mask = mask.copy()
    out_mask.values = mv.detach().numpy().astype(np.float32).copy()
    return FilterUnlearnResult(
        params=apply_filter_mask(params, out_mask),
        mask=out_mask,
        epochs_used=epochs_used,
        ca_trace=ca_trace,
        reached_ca_min=reached,
    )


def _masked_defense_accuracy(spec, t, mask, mv, defense, batch_size) -> float:
    correct = 0
    with torch.no_grad():
        for batch in iter_batches(defense, batch_size):
            logits = forward_torch(
                spec, t, torch.from_numpy(batch.images), training=False, mask=mask, mask_values=mv
            )
            correct += int((logits.argmax(dim=1).numpy() == batch.labels).sum())
    return correct / len(defense)


def filter_change_scores(spec: ModelSpec, before: ParameterStore, after: ParameterStore) -> np.ndarray:
    """Per-filter L2 norm of the kernel difference, over the full registry."""
    if before.names() != after.names():
        raise ValueError("parameter stores do not share a layout")
    scores = []
    for lid in spec.layer_ids():
        d = (after[f"{lid}.weight"] - before[f"{lid}.weight"]).astype(np.float64)
        scores.append(np.sqrt((d * d).reshape(d.shape[0], -1).sum(axis=1)))
    return np.concatenate(scores)


def prune_without_recovering(
    spec: ModelSpec, params: ParameterStore, params_hat: ParameterStore, q: float
) -> tuple[ParameterStore, int]:
    """Zero the floor(q*n) filters whose kernels changed LEAST during
    unlearning (ties, including all-zero scores, fall back to index order)."""
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"fraction must lie in [0,1], got {q}")
    scores = filter_change_scores(spec, params, params_hat)
    count = int(np.floor(q * scores.size))
    order = np.argsort(scores, kind="stable")
    keep = np.ones(scores.size, dtype=bool)
    keep[order[:count]] = False
    mask = ones_mask(spec, GRANULARITY_FILTER)
    mask.values = keep.astype(np.float32)
    return apply_filter_mask(params, mask), count


def recover_without_unlearning(
    spec: ModelSpec,
    params: ParameterStore,
    defense: Dataset,
    recover_cfg: RecoverConfig,
    prune_cfg: PruneConfig,
    clean_test: Dataset,
    asr_test: Dataset,
) -> AblationReport:
    """Run recovering and pruning directly on the input model, skipping the
    unlearning stage."""
    metrics_before = attack_metrics(spec, params, clean_test, asr_test)
    mask = recover(spec, params, defense, recover_cfg)
    pruned, count, dt = _prune_by_config(spec, params, mask, defense, prune_cfg)
    return AblationReport(
        variant="recover-wo-unlearn",
        metrics_before=metrics_before,
        metrics_after=attack_metrics(spec, pruned, clean_test, asr_test),
        pruned_count=count,
        notes={"threshold": dt, "mask_histogram": mask.histogram()},
    )


def learn_incorrectly(
    spec: ModelSpec,
    params: ParameterStore,
    defense: Dataset,
    params_hat_for_labels: ParameterStore,
    cfg: UnlearnConfig,
) -> ParameterStore:
    """Fine-tune by loss MINIMIZATION on defense samples relabeled with the
    unlearned model's predictions; stops once accuracy on the true labels
    falls to ca_min, mirroring the unlearning stop rule."""
    if len(defense) == 0:
        raise ValueError("defense set is empty")
    ca_min = cfg.resolve_ca_min(spec.num_classes)
    wrong_labels = predict_labels(spec, params_hat_for_labels, defense)
    relabeled = Dataset(
        images=defense.images.copy(),
        labels=wrong_labels,
        poison_flags=np.zeros(len(defense), dtype=bool),
        meta=dict(defense.meta),
    )

    t = {name: torch.from_numpy(params[name].copy()) for name in params.names()}
    trainable = params.trainable_names()
    for name in trainable:
        t[name].requires_grad_(True)

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([0xD5, epoch]).permutation(len(relabeled))
        for batch in iter_batches(relabeled, cfg.batch_size, order):
            x = torch.from_numpy(batch.images)
            y = torch.from_numpy(batch.labels)
            for name in trainable:
                if t[name].grad is not None:
                    t[name].grad = None
            logits = forward_torch(spec, t, x, training=True)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(f"incorrect-learning diverged at epoch {epoch}")
            loss.backward()
            with torch.no_grad():
                for name in trainable:
                    p, g = t[name], t[name].grad
                    if g is None:
                        continue
                    p.add_(-cfg.lr * g - (cfg.lr * cfg.weight_decay) * p)
        correct = 0
        with torch.no_grad():
            for batch in iter_batches(defense, cfg.batch_size):
                logits = forward_torch(spec, t, torch.from_numpy(batch.images), training=False)
                correct += int((logits.argmax(dim=1).numpy() == batch.labels).sum())
        if correct / len(defense) <= ca_min:
            break

    return store_from_torch(params, t)


def last_layer_activation_means(
    spec: ModelSpec, params: ParameterStore, defense: Dataset, batch_size: int = 256
) -> np.ndarray:
    """Mean post-relu activation per filter of the last conv block."""
    last = spec.layer_ids()[-1]
    t = torch_params(params)
    pad = spec.kernel_size // 2
    total = np.zeros(spec.conv_channels[-1], dtype=np.float64)
    seen = 0
    with torch.no_grad():
        for batch in iter_batches(defense, batch_size):
            x = torch.from_numpy(batch.images)
            for i, lid in enumerate(spec.layer_ids()):
                x = F.conv2d(x, t[f"{lid}.weight"], t[f"{lid}.bias"], padding=pad)
                x = F.batch_norm(
                    x,
                    t[f"bn{i + 1}.running_mean"],
                    t[f"bn{i + 1}.running_var"],
                    t[f"bn{i + 1}.scale"],
                    t[f"bn{i + 1}.shift"],
                    training=False,
                    eps=1e-5,
                )
                x = F.relu(x)
                if lid == last:
                    total += x.mean(dim=(2, 3)).sum(dim=0).numpy()
                    seen += batch.size
                    break
                if i < spec.num_blocks - 1:
                    x = F.max_pool2d(x, 2)
    return (total / seen).astype(np.float64)


def fine_pruning(
    spec: ModelSpec, params: ParameterStore, defense: Dataset, ca_stop: float = 0.8
) -> tuple[ParameterStore, int]:
    """Iteratively zero the most dormant last-layer filters (lowest mean
    activation on defense data, ranked once) and stop just before defense
    accuracy would fall below ca_stop."""
    if not (0.0 <= ca_stop < 1.0):
        raise ValueError(f"ca_stop must lie in [0,1), got {ca_stop}")
    last = spec.layer_ids()[-1]
    acts = last_layer_activation_means(spec, params, defense)
    order = np.argsort(acts, kind="stable")

    pruned = params.copy()
    count = 0
    for j in order:
        saved_w = pruned[f"{last}.weight"][j].copy()
        saved_b = pruned[f"{last}.bias"][j].copy()
        pruned.tensors[f"{last}.weight"][j] = 0.0
        pruned.tensors[f"{last}.bias"][j] = 0.0
        if accuracy(spec, pruned, defense) < ca_stop:
            pruned.tensors[f"{last}.weight"][j] = saved_w
            pruned.tensors[f"{last}.bias"][j] = saved_b
            break
        count += 1
    return pruned, count


def _prune_by_config(
    spec: ModelSpec,
    params: ParameterStore,
    mask: UnitMask,
    defense: Dataset,
    prune_cfg: PruneConfig,
) -> tuple[ParameterStore, int, float | None]:
    """Threshold pruning of the original weights under either granularity."""
    if prune_cfg.mode != "threshold":
        raise ValueError("ablation variants prune by threshold")
    if prune_cfg.threshold is None:
        dt = select_dynamic_threshold(spec, params, mask, defense, prune_cfg.ca_budget).dt
    else:
        dt = prune_cfg.threshold
    if mask.granularity == GRANULARITY_FILTER:
        pruned, count = prune_threshold(spec, params, mask, dt)
    else:
        pruned, _, count = prune_threshold_neuron(spec, params, mask, dt)
    return pruned, count, float(dt)


def granularity_matrix(
    spec: ModelSpec,
    params: ParameterStore,
    defense: Dataset,
    unlearn_cfg: UnlearnConfig,
    recover_cfg: RecoverConfig,
    prune_cfg: PruneConfig,
    clean_test: Dataset,
    asr_test: Dataset,
    fu_cfg: UnlearnConfig | None = None,
    probe_image: np.ndarray | None = None,
    out_dir=None,
) -> dict[str, AblationReport]:
    """All four unlearning/recovering pairings on one input model.

    Unlearning runs once per style (full-parameter and filter-mask) and both
    recovering granularities are applied to each. Feature-map CSVs of the
    recovered models are written when a probe image and out_dir are given.
    """
    fu_cfg = fu_cfg or unlearn_cfg
    metrics_before = attack_metrics(spec, params, clean_test, asr_test)

    nu = unlearn(spec, params, defense, unlearn_cfg)
    fu = filter_unlearn(spec, params, defense, fu_cfg)

    reports: dict[str, AblationReport] = {}
    for variant, hat, unlearn_note in (
        ("NU-FR", nu.params, {"unlearn_epochs": nu.epochs_used}),
        ("NU-NR", nu.params, {"unlearn_epochs": nu.epochs_used}),
        ("FU-FR", fu.params, {"unlearn_epochs": fu.epochs_used}),
        ("FU-NR", fu.params, {"unlearn_epochs": fu.epochs_used}),
    ):
        granularity = GRANULARITY_FILTER if variant.endswith("FR") else GRANULARITY_NEURON
        rc = replace(recover_cfg, granularity=granularity)
        mask = recover(spec, hat, defense, rc)
        pruned, count, dt = _prune_by_config(spec, params, mask, defense, prune_cfg)
        reports[variant] = AblationReport(
            variant=variant,
            metrics_before=metrics_before,
            metrics_after=attack_metrics(spec, pruned, clean_test, asr_test),
            pruned_count=count,
            notes={**unlearn_note, "threshold": dt},
        )
        if probe_image is not None and out_dir is not None:
            vdir = Path(out_dir) / variant
            vdir.mkdir(parents=True, exist_ok=True)
            shown = (
                apply_filter_mask(hat, mask)
                if granularity == GRANULARITY_FILTER
                else apply_neuron_mask(hat, mask)
            )
            for lid in spec.layer_ids():
                emit_feature_maps(spec, shown, probe_image, lid, path=vdir / f"fmap_{lid}.csv")
    return reports
