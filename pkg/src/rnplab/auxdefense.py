"""Defense tasks that benefit from the unlearned model: trigger
reverse-engineering with MAD anomaly flagging, and blend-entropy scoring of
suspect inputs. Each runs against any parameter store, so callers can compare
the original and unlearned models directly."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, iter_batches
from .model import ModelSpec, ParameterStore
from .nets import NumericError, forward, forward_torch, softmax, torch_params, Batch

MAD_SCALE = 1.4826  # normal-consistency factor
ANOMALY_CUTOFF = 2.0


@dataclass
class NCConfig:
    lambda_l1: float = 0.01
    steps: int = 100  # epochs over the (possibly subsampled) defense set
    lr: float = 0.1
    batch_size: int = 128
    max_samples: int | None = None

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return {
            "lambda_l1": self.lambda_l1,
            "steps": self.steps,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_samples": self.max_samples,
        }


@dataclass
class RecoveredTrigger:
    nc_mask: np.ndarray  # [H, W] in [0,1]
    pattern: np.ndarray  # [C, H, W] in [0,1]
    l1_norm: float
    target_class: int

    def __post_init__(self):
        self.nc_mask = np.ascontiguousarray(self.nc_mask, dtype=np.float32)
        self.pattern = np.ascontiguousarray(self.pattern, dtype=np.float32)
        if self.nc_mask.min() < 0 or self.nc_mask.max() > 1:
            raise ValueError("nc_mask values must lie in [0,1]")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise ValueError("pattern values must lie in [0,1]")


def nc_optimize(
    spec: ModelSpec,
    params: ParameterStore,
    target: int,
    defense: Dataset,
    cfg: NCConfig | None = None,
) -> RecoveredTrigger:
    """Recover the smallest blend mask steering predictions to ``target``.

    Minimizes CE(f((1-m)*x + m*pattern), target) + lambda*|m|_1 by projected
    gradient descent; mask and pattern start at 0.5 and stay in [0,1].
    """
    cfg = cfg or NCConfig()
    if not (0 <= target < spec.num_classes):
        raise ValueError(f"target {target} outside [0,{spec.num_classes})")
    if len(defense) == 0:
        raise ValueError("defense set is empty")
    source = defense
    if cfg.max_samples is not None and cfg.max_samples < len(defense):
        source = defense.subset(np.arange(cfg.max_samples))

    c, h, w = spec.input_shape
    t = torch_params(params)
    m = torch.full((h, w), 0.5, dtype=torch.float32, requires_grad=True)
    pattern = torch.full((c, h, w), 0.5, dtype=torch.float32, requires_grad=True)

    for _ in range(cfg.steps):
        for batch in iter_batches(source, cfg.batch_size):
            x = torch.from_numpy(batch.images)
            y = torch.full((batch.size,), target, dtype=torch.long)
            if m.grad is not None:
                m.grad = None
            if pattern.grad is not None:
                pattern.grad = None
            mb = m[None, None, :, :]
            blended = (1.0 - mb) * x + mb * pattern[None]
            logits = forward_torch(spec, t, blended, training=False)
            loss = F.cross_entropy(logits, y) + cfg.lambda_l1 * m.abs().sum()
            if not torch.isfinite(loss):
                raise NumericError("trigger recovery diverged (non-finite loss)")
            loss.backward()
            with torch.no_grad():
                if m.grad is not None:
                    m.add_(m.grad, alpha=-cfg.lr)
                if pattern.grad is not None:
                    pattern.add_(pattern.grad, alpha=-cfg.lr)
                m.clamp_(0.0, 1.0)
                pattern.clamp_(0.0, 1.0)

    mask_np = m.detach().numpy().copy()
    return RecoveredTrigger(
        nc_mask=mask_np,
        pattern=pattern.detach().numpy().copy(),
        l1_norm=float(mask_np.sum()),
        target_class=target,
    )


def recover_all_classes(
    spec: ModelSpec, params: ParameterStore, defense: Dataset, cfg: NCConfig | None = None
) -> list[RecoveredTrigger]:
    return [nc_optimize(spec, params, y, defense, cfg) for y in range(spec.num_classes)]


def nc_anomaly(l1_norms) -> tuple[np.ndarray, list[int]]:
    """MAD anomaly indices per class and the classes flagged as backdoored
    (index > 2 on the small side of the median)."""
    norms = np.asarray(l1_norms, dtype=np.float64)
    if norms.size < 3:
        raise ValueError("anomaly detection needs at least 3 classes")
    med = float(np.median(norms))
    mad = float(np.median(np.abs(norms - med)))
    dev = np.abs(norms - med)
    if mad == 0.0:
        indices = np.where(dev == 0.0, 0.0, np.inf)
    else:
        indices = dev / (MAD_SCALE * mad)
    flagged = [int(i) for i in np.flatnonzero((indices > ANOMALY_CUTOFF) & (norms < med))]
    return indices, flagged


def strip_entropy(
    spec: ModelSpec,
    params: ParameterStore,
    sample: np.ndarray,
    overlay_pool: Dataset,
    n_overlays: int = 64,
) -> float:
    """Mean prediction entropy of the sample blended 50/50 with pool images.

    Overlays are picked deterministically (evenly spaced pool indices), so
    the score depends only on the sample, pool, and model.
    """
    if len(overlay_pool) == 0:
        raise ValueError("overlay pool is empty")
    if n_overlays < 1:
        raise ValueError("n_overlays must be >= 1")
    sample = np.asarray(sample, dtype=np.float32)
    pool_n = len(overlay_pool)
    idx = np.array([(t * pool_n) // n_overlays for t in range(n_overlays)], dtype=np.int64)
    blends = np.clip(0.5 * sample[None] + 0.5 * overlay_pool.images[idx], 0.0, 1.0)
    logits = forward(
        spec, params, Batch(images=blends, labels=np.zeros(n_overlays, dtype=np.int64))
    )
    probs = softmax(logits)
    ent = -np.sum(probs * np.log(np.clip(probs, 1e-12, None)), axis=1)
    return float(ent.mean())


def strip_entropies(
    spec: ModelSpec,
    params: ParameterStore,
    samples: Dataset,
    overlay_pool: Dataset,
    n_overlays: int = 64,
) -> np.ndarray:
    return np.array(
        [
            strip_entropy(spec, params, samples.images[i], overlay_pool, n_overlays)
            for i in range(len(samples))
        ]
    )


def strip_gap(
    spec: ModelSpec,
    params: ParameterStore,
    clean_set: Dataset,
    backdoored_set: Dataset,
    overlay_pool: Dataset,
    n_overlays: int = 64,
) -> float:
    """Mean blend entropy of clean samples minus that of backdoored samples.
    Larger gaps make entropy thresholding more reliable."""
    if len(clean_set) == 0 or len(backdoored_set) == 0:
        raise ValueError("both sample sets must be non-empty")
    clean = strip_entropies(spec, params, clean_set, overlay_pool, n_overlays)
    bad = strip_entropies(spec, params, backdoored_set, overlay_pool, n_overlays)
    return float(clean.mean() - bad.mean())


def save_trigger(trigger: RecoveredTrigger, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "mask.bin").write_bytes(np.ascontiguousarray(trigger.nc_mask, dtype="<f4").tobytes())
    (path / "pattern.bin").write_bytes(
        np.ascontiguousarray(trigger.pattern, dtype="<f4").tobytes()
    )
    meta = {
        "mask_shape": list(trigger.nc_mask.shape),
        "pattern_shape": list(trigger.pattern.shape),
        "l1_norm": trigger.l1_norm,
        "target_class": trigger.target_class,
    }
    (path / "trigger.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def load_trigger(path) -> RecoveredTrigger:
    path = Path(path)
    meta = json.loads((path / "trigger.json").read_text(encoding="utf-8"))
    mask = np.frombuffer((path / "mask.bin").read_bytes(), dtype="<f4").reshape(
        meta["mask_shape"]
    )
    pattern = np.frombuffer((path / "pattern.bin").read_bytes(), dtype="<f4").reshape(
        meta["pattern_shape"]
    )
    return RecoveredTrigger(
        nc_mask=mask.copy(),
        pattern=pattern.copy(),
        l1_norm=float(meta["l1_norm"]),
        target_class=int(meta["target_class"]),
    )
