"""Neuron unlearning, filter recovering, and mask-guided pruning.

The defense runs in three stages on a small clean defense set: gradient
ascent on all trainable parameters until defense accuracy collapses, then a
per-filter [0,1] mask learned over the frozen unlearned weights by loss
minimization, then binarized pruning of the ORIGINAL weights at a fixed or
dynamically selected threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, iter_batches
from .masks import GRANULARITY_FILTER, GRANULARITY_NEURON, UnitMask, ones_mask, registry_indices
from .model import ModelSpec, ParameterStore
from .nets import (
    NumericError,
    apply_filter_mask,
    apply_neuron_mask,
    check_mask_layout,
    forward_torch,
    store_from_torch,
    torch_params,
)
from .train import Metrics, accuracy, attack_metrics, augment_images, predict_labels


class PipelineError(RuntimeError):
    """Stage-tagged failure inside the defense pipeline."""


@dataclass
class UnlearnConfig:
    """Ascent settings. ``collapse_share`` additionally requires the modal
    prediction share to reach that level before stopping, which pins the stop
    at the collapsed end state instead of a transient crossing; None keeps
    the plain accuracy-threshold rule."""

    lr: float = 0.05
    weight_decay: float = 0.05
    max_epochs: int = 20
    ca_min: float | None = None  # None -> 1/K at call time
    batch_size: int = 128
    augment: bool = True
    collapse_share: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.ca_min is not None and not (0.0 < self.ca_min <= 1.0):
            raise ValueError(f"ca_min must lie in (0,1], got {self.ca_min}")
        if self.collapse_share is not None and not (0.0 <= self.collapse_share <= 1.0):
            raise ValueError("collapse_share must lie in [0,1]")

    def resolve_ca_min(self, num_classes: int) -> float:
        return self.ca_min if self.ca_min is not None else 1.0 / num_classes

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "max_epochs": self.max_epochs,
            "ca_min": self.ca_min,
            "batch_size": self.batch_size,
            "augment": self.augment,
            "collapse_share": self.collapse_share,
        }


@dataclass
class RecoverConfig:
    lr: float = 0.2
    epochs: int = 20
    granularity: str = GRANULARITY_FILTER
    layer_subset: list[str] | None = None
    batch_size: int = 128
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.granularity not in (GRANULARITY_FILTER, GRANULARITY_NEURON):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "epochs": self.epochs,
            "granularity": self.granularity,
            "layer_subset": self.layer_subset,
            "batch_size": self.batch_size,
            "augment": self.augment,
        }


@dataclass
class PruneConfig:
    mode: str = "threshold"
    threshold: float | None = None  # fixed cutoff; None -> dynamic selection
    fraction: float | None = None
    ca_budget: float = 0.02

    def __post_init__(self):
        if self.mode not in ("threshold", "fraction"):
            raise ValueError(f"mode must be 'threshold' or 'fraction', got {self.mode!r}")
        if self.mode == "fraction":
            if self.fraction is None or not (0.0 <= self.fraction <= 1.0):
                raise ValueError("fraction mode requires fraction in [0,1]")
        if self.threshold is not None and not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must lie in [0,1]")
        if self.mode == "threshold" and self.threshold is None and self.ca_budget <= 0:
            raise ValueError("dynamic threshold selection requires ca_budget > 0")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "threshold": self.threshold,
            "fraction": self.fraction,
            "ca_budget": self.ca_budget,
        }


@dataclass
class UnlearnResult:
    params: ParameterStore
    epochs_used: int
    ca_trace: list[float]
    reached_ca_min: bool


def _defense_predictions_torch(spec, t, defense, batch_size) -> np.ndarray:
    preds = []
    with torch.no_grad():
        for batch in iter_batches(defense, batch_size):
            logits = forward_torch(
                spec, t, torch.from_numpy(batch.images), training=False
            )
            preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds)


def unlearn(
    spec: ModelSpec, params: ParameterStore, defense: Dataset, cfg: UnlearnConfig
) -> UnlearnResult:
    """Gradient ascent on all trainable parameters over the defense data.

    Stops after the first epoch whose defense accuracy falls to ca_min; with
    ``collapse_share`` set, the stop additionally waits until the predictions
    have concentrated on a single class (the stable end state of the ascent).
    Never stopping returns the max_epochs state with ``reached_ca_min=False``.
    Batchnorm runs in train mode during the ascent, so running statistics
    drift with it. Defense batches are reshuffled and (by default) flip/crop
    augmented each epoch, deterministically.
    """
    if len(defense) == 0:
        raise ValueError("defense set is empty")
    if defense.poison_flags.any():
        raise ValueError("defense data must be clean")
    ca_min = cfg.resolve_ca_min(spec.num_classes)

    t = {name: torch.from_numpy(params[name].copy()) for name in params.names()}
    trainable = params.trainable_names()
    for name in trainable:
        t[name].requires_grad_(True)

    ca_trace: list[float] = []
    epochs_used = 0
    reached = False
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([0xA5CE, epoch])
        images = augment_images(defense.images, rng) if cfg.augment else defense.images
        order = rng.permutation(len(defense))
        for start in range(0, len(defense), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            x = torch.from_numpy(np.ascontiguousarray(images[sel]))
            y = torch.from_numpy(defense.labels[sel])
            for name in trainable:
                if t[name].grad is not None:
                    t[name].grad = None
            logits = forward_torch(spec, t, x, training=True)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(f"unlearning diverged at epoch {epoch}")
            loss.backward()
            with torch.no_grad():
                for name in trainable:
                    p, g = t[name], t[name].grad
                    if g is None:
                        continue
                    # ascend with decay toward zero: v + lr*g - lr*wd*v
                    p.add_(cfg.lr * g - (cfg.lr * cfg.weight_decay) * p)
        epochs_used = epoch + 1
        for name in trainable:
            if not torch.isfinite(t[name]).all():
                raise NumericError(f"unlearning diverged at epoch {epoch} (non-finite {name})")
        preds = _defense_predictions_torch(spec, t, defense, cfg.batch_size)
        ca = float((preds == defense.labels).mean())
        ca_trace.append(ca)
        if ca <= ca_min:
            if cfg.collapse_share is not None:
                share = np.bincount(preds, minlength=spec.num_classes).max() / len(defense)
                if share < cfg.collapse_share:
                    continue
            reached = True
            break

    return UnlearnResult(
        params=store_from_torch(params, t),
        epochs_used=epochs_used,
        ca_trace=ca_trace,
        reached_ca_min=reached,
    )


def infer_backdoor_label(
    spec: ModelSpec, params_hat: ParameterStore, defense: Dataset
) -> tuple[int, float]:
    """Modal predicted class of the unlearned model over the defense data.

    Ties break toward the smaller class index. Returns (label, vote share).
    """
    preds = predict_labels(spec, params_hat, defense)
    counts = np.bincount(preds, minlength=spec.num_classes)
    label = int(np.argmax(counts))
    return label, float(counts[label] / len(defense))


def recover(
    spec: ModelSpec, params_hat: ParameterStore, defense: Dataset, cfg: RecoverConfig
) -> UnitMask:
    """Learn a [0,1] unit mask over the frozen unlearned weights by projected
    SGD on the defense cross-entropy. Parameters and batchnorm statistics are
    never updated; the mask starts at all ones and is clipped after every step."""
    if len(defense) == 0:
        raise ValueError("defense set is empty")
    mask = ones_mask(spec, cfg.granularity, cfg.layer_subset)
    check_mask_layout(spec, mask)
    if cfg.epochs == 0:
        return mask

    t = torch_params(params_hat)
    mv = torch.from_numpy(mask.values.copy()).requires_grad_(True)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([0x5EC0, epoch])
        images = augment_images(defense.images, rng) if cfg.augment else defense.images
        order = rng.permutation(len(defense))
        for start in range(0, len(defense), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            x = torch.from_numpy(np.ascontiguousarray(images[sel]))
            y = torch.from_numpy(defense.labels[sel])
            if mv.grad is not None:
                mv.grad = None
            logits = forward_torch(
                spec, t, x, training=False, mask=mask, mask_values=mv
            )
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericError("recovering diverged (non-finite loss)")
            loss.backward()
            with torch.no_grad():
                mv.add_(mv.grad, alpha=-cfg.lr)
                mv.clamp_(0.0, 1.0)

    out = mask.copy()
    out.values = mv.detach().numpy().astype(np.float32).copy()
    return out


def _binary_filter_mask(mask: UnitMask, keep: np.ndarray) -> UnitMask:
    out = mask.copy()
    out.values = keep.astype(np.float32)
    return out


def prune_threshold(
    spec: ModelSpec, params_original: ParameterStore, mask: UnitMask, dt: float
) -> tuple[ParameterStore, int]:
    """Zero kernel and bias of every filter whose mask value is <= dt, in a
    copy of the ORIGINAL parameters."""
    if mask.granularity != GRANULARITY_FILTER:
        raise ValueError("threshold pruning needs a filter-granularity mask")
    check_mask_layout(spec, mask)
    keep = mask.values > dt
    pruned = apply_filter_mask(params_original, _binary_filter_mask(mask, keep))
    return pruned, int((~keep).sum())


def threshold_pruned_ids(spec: ModelSpec, mask: UnitMask, dt: float) -> list[int]:
    """Registry indices of the filters a threshold prune would remove."""
    reg = registry_indices(spec, mask)
    return [int(i) for i in reg[mask.values <= dt]]


def prune_fraction(
    spec: ModelSpec, params_original: ParameterStore, mask: UnitMask, q: float
) -> tuple[ParameterStore, int]:
    """Zero the floor(q*n) filters with the smallest mask values (ties by
    filter index), in a copy of the ORIGINAL parameters."""
    if mask.granularity != GRANULARITY_FILTER:
        raise ValueError("fraction pruning needs a filter-granularity mask")
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"fraction must lie in [0,1], got {q}")
    check_mask_layout(spec, mask)
    count = int(np.floor(q * mask.size))
    order = np.argsort(mask.values, kind="stable")
    keep = np.ones(mask.size, dtype=bool)
    keep[order[:count]] = False
    pruned = apply_filter_mask(params_original, _binary_filter_mask(mask, keep))
    return pruned, count


def fraction_pruned_ids(spec: ModelSpec, mask: UnitMask, q: float) -> list[int]:
    count = int(np.floor(q * mask.size))
    order = np.argsort(mask.values, kind="stable")
    reg = registry_indices(spec, mask)
    return sorted(int(reg[i]) for i in order[:count])


def prune_threshold_neuron(
    spec: ModelSpec, params_original: ParameterStore, mask: UnitMask, dt: float
) -> tuple[ParameterStore, int, int]:
    """Per-weight thresholding for neuron-granularity masks.

    Returns (pruned store, zeroed weight count, equivalent filter count). A
    filter counts as pruned when at least 90% of its kernel weights fall at or
    below the threshold, keeping counts comparable with filter pruning.
    """
    if mask.granularity != GRANULARITY_NEURON:
        raise ValueError("neuron pruning needs a neuron-granularity mask")
    check_mask_layout(spec, mask)
    keep = mask.values > dt
    out = mask.copy()
    out.values = keep.astype(np.float32)
    pruned = apply_neuron_mask(params_original, out)

    filter_equiv = 0
    for lid in mask.layer_sizes:
        kshape = params_original[f"{lid}.weight"].shape
        below = (~keep[mask.layer_slice(lid)]).reshape(kshape)
        per_filter = below.reshape(kshape[0], -1).mean(axis=1)
        filter_equiv += int((per_filter >= 0.9).sum())
    return pruned, int((~keep).sum()), filter_equiv


@dataclass
class ThresholdSelection:
    dt: float
    satisfied: bool
    trace: list[dict] = field(default_factory=list)


def _threshold_candidates(mask: UnitMask) -> list[float]:
    grid = [round(0.05 * k, 2) for k in range(20)]
    distinct = np.unique(mask.values.astype(np.float64))
    if distinct.size > 256:
        qs = np.quantile(distinct, np.linspace(0.0, 1.0, 101))
        distinct = np.unique(qs)
    vals = sorted(set(grid) | {float(v) for v in distinct if 0.0 <= v <= 1.0})
    return vals


def select_dynamic_threshold(
    spec: ModelSpec,
    params: ParameterStore,
    mask: UnitMask,
    defense: Dataset,
    ca_budget: float = 0.02,
) -> ThresholdSelection:
    """Largest threshold whose pruned model keeps defense accuracy within
    ca_budget of the unpruned model. Falls back to 0 when nothing qualifies."""
    if ca_budget <= 0:
        raise ValueError("ca_budget must be positive")
    base_acc = accuracy(spec, params, defense)
    floor = base_acc - ca_budget

    trace = []
    best = None
    for dt in _threshold_candidates(mask):
        if mask.granularity == GRANULARITY_FILTER:
            pruned, count = prune_threshold(spec, params, mask, dt)
        else:
            pruned, _, count = prune_threshold_neuron(spec, params, mask, dt)
        acc = accuracy(spec, pruned, defense)
        ok = acc >= floor
        trace.append(
            {"dt": float(dt), "pruned_count": int(count), "defense_acc": float(acc), "accepted": bool(ok)}
        )
        if ok:
            best = float(dt)
    if best is None:
        return ThresholdSelection(dt=0.0, satisfied=False, trace=trace)
    return ThresholdSelection(dt=best, satisfied=True, trace=trace)


@dataclass
class ExperimentReport:
    """Everything one defense run produced, JSON round-trippable."""

    metrics_before: Metrics
    metrics_after: Metrics
    backdoor_label: int
    vote_share: float
    unlearn_epochs_used: int
    reached_ca_min: bool
    unlearn_ca_trace: list[float]
    mask_histogram: list[int]
    prune_mode: str
    threshold: float | None
    fraction: float | None
    threshold_satisfied: bool | None
    threshold_trace: list[dict] | None
    pruned_count: int
    pruned_filter_ids: list[int]
    configs: dict
    attack: str = ""
    defense: str = "rnp"
    seeds: dict = field(default_factory=dict)
    wall_clock_s: float | None = None
    tool_version: str | None = None
    schema_version: str = "1"

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "attack": self.attack,
            "defense": self.defense,
            "metrics_before": self.metrics_before.to_dict(),
            "metrics_after": self.metrics_after.to_dict(),
            "backdoor_label": self.backdoor_label,
            "vote_share": self.vote_share,
            "unlearn_epochs_used": self.unlearn_epochs_used,
            "reached_ca_min": self.reached_ca_min,
            "unlearn_ca_trace": self.unlearn_ca_trace,
            "mask_histogram": self.mask_histogram,
            "prune_mode": self.prune_mode,
            "threshold": self.threshold,
            "fraction": self.fraction,
            "threshold_satisfied": self.threshold_satisfied,
            "threshold_trace": self.threshold_trace,
            "pruned_count": self.pruned_count,
            "pruned_filter_ids": self.pruned_filter_ids,
            "configs": self.configs,
            "seeds": self.seeds,
            "wall_clock_s": self.wall_clock_s,
            "tool_version": self.tool_version,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentReport":
        return ExperimentReport(
            metrics_before=Metrics.from_dict(d["metrics_before"]),
            metrics_after=Metrics.from_dict(d["metrics_after"]),
            backdoor_label=int(d["backdoor_label"]),
            vote_share=float(d["vote_share"]),
            unlearn_epochs_used=int(d["unlearn_epochs_used"]),
            reached_ca_min=bool(d["reached_ca_min"]),
            unlearn_ca_trace=[float(x) for x in d["unlearn_ca_trace"]],
            mask_histogram=[int(x) for x in d["mask_histogram"]],
            prune_mode=d["prune_mode"],
            threshold=d["threshold"],
            fraction=d["fraction"],
            threshold_satisfied=d["threshold_satisfied"],
            threshold_trace=d["threshold_trace"],
            pruned_count=int(d["pruned_count"]),
            pruned_filter_ids=[int(x) for x in d["pruned_filter_ids"]],
            configs=d["configs"],
            attack=d.get("attack", ""),
            defense=d.get("defense", "rnp"),
            seeds=d.get("seeds", {}),
            wall_clock_s=d.get("wall_clock_s"),
            tool_version=d.get("tool_version"),
            schema_version=d.get("schema_version", "1"),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @staticmethod
    def load(path) -> "ExperimentReport":
        return ExperimentReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def run_pipeline(
    spec: ModelSpec,
    params: ParameterStore,
    defense: Dataset,
    unlearn_cfg: UnlearnConfig,
    recover_cfg: RecoverConfig,
    prune_cfg: PruneConfig,
    clean_test: Dataset,
    asr_test: Dataset,
    attack: str = "",
    seeds: dict | None = None,
    artifacts: dict | None = None,
) -> ExperimentReport:
    """Full defense: unlearn -> infer label -> recover -> prune the original
    weights -> re-evaluate. ``artifacts``, when given, receives the unlearned
    store, the recovered mask, and the pruned store for persistence."""

    def stage(name, fn):
        try:
            return fn()
        except Exception as e:  # noqa: BLE001 - retag with the failing stage
            raise PipelineError(f"stage {name}: {e}") from e

    metrics_before = stage(
        "evaluate-before", lambda: attack_metrics(spec, params, clean_test, asr_test)
    )
    ur = stage("unlearn", lambda: unlearn(spec, params, defense, unlearn_cfg))
    label, share = stage(
        "infer-label", lambda: infer_backdoor_label(spec, ur.params, defense)
    )
    mask = stage("recover", lambda: recover(spec, ur.params, defense, recover_cfg))

    selection = None
    if prune_cfg.mode == "threshold":
        if prune_cfg.threshold is None:
            selection = stage(
                "select-threshold",
                lambda: select_dynamic_threshold(spec, params, mask, defense, prune_cfg.ca_budget),
            )
            dt = selection.dt
        else:
            dt = prune_cfg.threshold
        if mask.granularity == GRANULARITY_FILTER:
            pruned, count = stage("prune", lambda: prune_threshold(spec, params, mask, dt))
            pruned_ids = threshold_pruned_ids(spec, mask, dt)
        else:
            pruned, _, count = stage(
                "prune", lambda: prune_threshold_neuron(spec, params, mask, dt)
            )
            pruned_ids = []
        used_threshold, used_fraction = float(dt), None
    else:
        pruned, count = stage(
            "prune", lambda: prune_fraction(spec, params, mask, prune_cfg.fraction)
        )
        pruned_ids = fraction_pruned_ids(spec, mask, prune_cfg.fraction)
        used_threshold, used_fraction = None, prune_cfg.fraction

    metrics_after = stage(
        "evaluate-after", lambda: attack_metrics(spec, pruned, clean_test, asr_test)
    )

    if artifacts is not None:
        artifacts["unlearned"] = ur.params
        artifacts["mask"] = mask
        artifacts["pruned"] = pruned

    return ExperimentReport(
        metrics_before=metrics_before,
        metrics_after=metrics_after,
        backdoor_label=label,
        vote_share=share,
        unlearn_epochs_used=ur.epochs_used,
        reached_ca_min=ur.reached_ca_min,
        unlearn_ca_trace=[float(x) for x in ur.ca_trace],
        mask_histogram=mask.histogram(),
        prune_mode=prune_cfg.mode,
        threshold=used_threshold,
        fraction=used_fraction,
        threshold_satisfied=None if selection is None else selection.satisfied,
        threshold_trace=None if selection is None else selection.trace,
        pruned_count=int(count),
        pruned_filter_ids=pruned_ids,
        configs={
            "unlearn": unlearn_cfg.to_dict(),
            "recover": recover_cfg.to_dict(),
            "prune": prune_cfg.to_dict(),
        },
        attack=attack,
        seeds=dict(seeds or {}),
    )
