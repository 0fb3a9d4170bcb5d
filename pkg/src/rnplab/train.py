"""Classifier training on clean or poisoned data, and the CA/ASR metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import TRIGGER_BADNETS, Dataset, TriggerSpec, apply_trigger, iter_batches
from .model import ModelSpec, ParameterStore, build_model
from .nets import NumericError, forward, forward_torch, store_from_torch
from .seeding import stage_seed


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (20,)
    lr_decay: float = 0.1
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "milestones": list(self.milestones),
            "lr_decay": self.lr_decay,
            "seed": self.seed,
            "augment": self.augment,
        }


@dataclass
class Metrics:
    """Clean accuracy and attack success rate, both fractions in [0,1]."""

    ca: float
    asr: float

    def __post_init__(self):
        for name, v in (("ca", self.ca), ("asr", self.asr)):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0,1], got {v}")

    def to_dict(self) -> dict:
        return {"ca": self.ca, "asr": self.asr}

    @staticmethod
    def from_dict(d: dict) -> "Metrics":
        return Metrics(ca=float(d["ca"]), asr=float(d["asr"]))


def augment_images(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5) and pad-4 random crop, per sample."""
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 9, size=(n, 2))
    padded = np.zeros((n, c, h + 8, w + 8), dtype=np.float32)
    padded[:, :, 4 : 4 + h, 4 : 4 + w] = images
    out = np.empty_like(images)
    for i in range(n):
        oi, oj = offs[i]
        crop = padded[i, :, oi : oi + h, oj : oj + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def restamp_patch_triggers(images: np.ndarray, dataset: Dataset) -> None:
    """Re-apply a corner-patch trigger to flagged samples after augmentation.

    Augmentation displaces a stamped patch, which would decouple the trigger
    from its test-time position; real poisoning pipelines stamp after the
    transform, so flagged samples get a fresh stamp here. Global triggers
    (blend, sinusoid) survive crop/flip statistically and are left alone.
    """
    if not dataset.poison_flags.any():
        return
    trig_meta = dataset.meta.get("trigger")
    if not trig_meta or trig_meta.get("kind") != TRIGGER_BADNETS:
        return
    trig = TriggerSpec(
        kind=TRIGGER_BADNETS,
        patch_size=int(trig_meta["patch_size"]),
        pattern_seed=int(trig_meta.get("pattern_seed", 0)),
    )
    for i in np.flatnonzero(dataset.poison_flags):
        images[i] = apply_trigger(images[i], trig)


def train(spec: ModelSpec, dataset: Dataset, cfg: TrainConfig) -> tuple[ParameterStore, list[dict]]:
    """SGD-with-momentum training, deterministic for a fixed config.

    Shuffle order and augmentation draws are derived from (cfg.seed, epoch),
    so the same config always produces a byte-identical checkpoint.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if int(dataset.labels.max()) >= spec.num_classes:
        raise ValueError("dataset labels exceed the spec's class count")

    store = build_model(spec, stage_seed(cfg.seed, "model-init"))
    t = {name: torch.from_numpy(store[name].copy()) for name in store.names()}
    trainable = store.trainable_names()
    for name in trainable:
        t[name].requires_grad_(True)
    opt = torch.optim.SGD(
        [t[name] for name in trainable],
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )

    n = len(dataset)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        lr_now = cfg.lr * (cfg.lr_decay ** sum(1 for m in cfg.milestones if m <= epoch))
        for group in opt.param_groups:
            group["lr"] = lr_now

        if cfg.augment:
            aug_rng = np.random.default_rng([cfg.seed, epoch, 0xA96])
            images = augment_images(dataset.images, aug_rng)
            restamp_patch_triggers(images, dataset)
        else:
            images = dataset.images
        order = np.random.default_rng([cfg.seed, epoch, 0x5FF]).permutation(n)

        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            x = torch.from_numpy(np.ascontiguousarray(images[sel]))
            y = torch.from_numpy(dataset.labels[sel])
            opt.zero_grad()
            logits = forward_torch(spec, t, x, training=True)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            total_loss += float(loss.item()) * sel.size
            correct += int((logits.detach().argmax(dim=1) == y).sum().item())
        history.append(
            {"epoch": epoch, "loss": total_loss / n, "acc": correct / n, "lr": lr_now}
        )

    return store_from_torch(store, t), history


def accuracy(spec: ModelSpec, params: ParameterStore, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax predictions matching labels (eval mode, fixed order)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    correct = 0
    for batch in iter_batches(dataset, batch_size):
        logits = forward(spec, params, batch, mode="eval")
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    return correct / len(dataset)


def predict_labels(spec: ModelSpec, params: ParameterStore, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample (eval mode, fixed order)."""
    preds = []
    for batch in iter_batches(dataset, batch_size):
        logits = forward(spec, params, batch, mode="eval")
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def attack_metrics(
    spec: ModelSpec, params: ParameterStore, clean_test: Dataset, asr_test: Dataset
) -> Metrics:
    """CA on the clean test set and ASR on the trigger-stamped test set."""
    return Metrics(
        ca=accuracy(spec, params, clean_test),
        asr=accuracy(spec, params, asr_test),
    )
