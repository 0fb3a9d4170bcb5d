"""Datasets, backdoor triggers, poisoning, and defense-set sampling.

The synthetic corpus stands in for CIFAR-10 at desk scale: each class is a
distinct hue with a class-indexed sinusoidal grating plus Gaussian pixel
noise, which a small convnet separates almost perfectly. The real CIFAR-10
binary archive can be ingested with ``load_cifar10`` for heavier validation.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import Batch

TRIGGER_BADNETS = "badnets"
TRIGGER_BLEND = "blend"
TRIGGER_SIG = "sig"

MODE_ALL_TO_ONE = "all-to-one"
MODE_ALL_TO_ALL = "all-to-all"

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-planar pixel bytes


@dataclass
class Dataset:
    """Images in [0,1], integer labels, and per-sample poison flags."""

    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    poison_flags: np.ndarray  # [N] bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.poison_flags = np.ascontiguousarray(self.poison_flags, dtype=bool)
        n = self.images.shape[0]
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (n,) or self.poison_flags.shape != (n,):
            raise ValueError("images, labels, and poison flags must agree in length")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0,1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        if "num_classes" in self.meta:
            return int(self.meta["num_classes"])
        return int(self.labels.max()) + 1

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            poison_flags=self.poison_flags[idx].copy(),
            meta=dict(self.meta),
        )

    def clean_portion(self) -> "Dataset":
        return self.subset(np.flatnonzero(~self.poison_flags))


def iter_batches(ds: Dataset, batch_size: int, order: np.ndarray | None = None):
    """Fixed-order minibatch iterator (the final batch may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = np.arange(len(ds)) if order is None else np.asarray(order, dtype=np.int64)
    for start in range(0, idx.size, batch_size):
        sel = idx[start : start + batch_size]
        yield Batch(images=ds.images[sel], labels=ds.labels[sel])


@dataclass(frozen=True)
class TriggerSpec:
    """Backdoor stamp description: grid patch, blended noise, or sinusoid."""

    kind: str
    patch_size: int = 3
    blend_alpha: float = 0.2
    sig_delta: float = 20.0 / 255.0
    sig_freq: int = 6
    pattern_seed: int = 0

    def __post_init__(self):
        if self.kind not in (TRIGGER_BADNETS, TRIGGER_BLEND, TRIGGER_SIG):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == TRIGGER_BADNETS and self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.kind == TRIGGER_BLEND and not (0.0 < self.blend_alpha < 1.0):
            raise ValueError("blend_alpha must lie in (0,1)")
        if self.kind == TRIGGER_SIG:
            if not (0.0 < self.sig_delta <= 1.0):
                raise ValueError("sig_delta must lie in (0,1]")
            if self.sig_freq < 1:
                raise ValueError("sig_freq must be >= 1")

    def describe(self) -> dict:
        d = {"kind": self.kind, "pattern_seed": self.pattern_seed}
        if self.kind == TRIGGER_BADNETS:
            d["patch_size"] = self.patch_size
        elif self.kind == TRIGGER_BLEND:
            d["blend_alpha"] = self.blend_alpha
        else:
            d["sig_delta"] = self.sig_delta
            d["sig_freq"] = self.sig_freq
        return d


@dataclass(frozen=True)
class PoisonPolicy:
    """Which fraction gets stamped and how flagged samples are relabeled."""

    rate: float
    target_label: int = 0
    mode: str = MODE_ALL_TO_ONE
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rate <= 1.0):
            raise ValueError(f"poisoning rate must lie in [0,1], got {self.rate}")
        if self.target_label < 0:
            raise ValueError("target label must be non-negative")
        if self.mode not in (MODE_ALL_TO_ONE, MODE_ALL_TO_ALL):
            raise ValueError(f"unknown poisoning mode {self.mode!r}")


def class_palette(num_classes: int) -> np.ndarray:
    """K evenly spaced fully saturated RGB hues."""
    return np.asarray(
        [colorsys.hsv_to_rgb(c / num_classes, 1.0, 1.0) for c in range(num_classes)],
        dtype=np.float32,
    )


def gen_synth(seed: int, per_class: int, num_classes: int, height: int = 32, width: int = 32) -> Dataset:
    """Deterministic synthetic classification corpus.

    Class c renders its palette hue modulated by a sinusoidal grating of
    frequency 1 + (c mod 5) and orientation pi*c/K, plus N(0, 0.1^2) pixel
    noise, clipped to [0,1].
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng([seed, 0xDA7A])
    palette = class_palette(num_classes)
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")

    images = np.empty((num_classes * per_class, 3, height, width), dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        freq = 1 + (c % 5)
        theta = np.pi * c / num_classes
        phase = np.cos(theta) * ii + np.sin(theta) * jj
        grating = 0.5 * (1.0 + np.sin(2.0 * np.pi * freq * phase / height))
        base = palette[c][:, None, None] * (0.4 + 0.6 * grating)[None, :, :]
        noise = rng.normal(0.0, 0.1, size=(per_class, 3, height, width))
        block = np.clip(base[None] + noise, 0.0, 1.0).astype(np.float32)
        images[c * per_class : (c + 1) * per_class] = block
        labels[c * per_class : (c + 1) * per_class] = c
    return Dataset(
        images=images,
        labels=labels,
        poison_flags=np.zeros(num_classes * per_class, dtype=bool),
        meta={
            "source": "synthetic",
            "seed": seed,
            "num_classes": num_classes,
            "per_class": per_class,
        },
    )


def load_cifar10(directory, split: str = "train") -> Dataset:
    """Ingest the CIFAR-10 binary archive (3073-byte records, channel-planar)."""
    directory = Path(directory)
    if split == "train":
        names = [f"data_batch_{i}" for i in range(1, 6)]
    elif split == "test":
        names = ["test_batch"]
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")

    chunks_img, chunks_lbl = [], []
    for name in names:
        path = directory / f"{name}.bin"
        if not path.exists():
            path = directory / name
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch file: {directory / name}(.bin)")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % _CIFAR_RECORD != 0:
            good = (raw.size // _CIFAR_RECORD) * _CIFAR_RECORD
            raise ValueError(
                f"{path}: length {raw.size} is not a multiple of {_CIFAR_RECORD} "
                f"(truncated record at offset {good})"
            )
        recs = raw.reshape(-1, _CIFAR_RECORD)
        chunks_lbl.append(recs[:, 0].astype(np.int64))
        chunks_img.append(recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)

    images = np.concatenate(chunks_img)
    labels = np.concatenate(chunks_lbl)
    if labels.max(initial=0) > 9:
        raise ValueError("label byte exceeds 9; not a CIFAR-10 archive")
    return Dataset(
        images=images,
        labels=labels,
        poison_flags=np.zeros(len(labels), dtype=bool),
        meta={"source": "cifar10", "split": split, "num_classes": 10},
    )


def _blend_noise(trig: TriggerSpec, shape: tuple[int, int, int]) -> np.ndarray:
    rng = np.random.default_rng([trig.pattern_seed, 0xB1ED])
    return rng.random(shape, dtype=np.float32)


def apply_trigger(image: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """Stamp one [C,H,W] image; the input is never modified."""
    image = np.asarray(image, dtype=np.float32)
    c, h, w = image.shape
    if trig.kind == TRIGGER_BADNETS:
        s = trig.patch_size
        if s > min(h, w):
            raise ValueError(f"patch size {s} exceeds image extent {min(h, w)}")
        out = image.copy()
        uu, vv = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        patch = ((uu + vv) % 2 == 0).astype(np.float32)
        out[:, h - s :, w - s :] = patch[None, :, :]
        return out
    if trig.kind == TRIGGER_BLEND:
        noise = _blend_noise(trig, (c, h, w))
        return np.clip((1.0 - trig.blend_alpha) * image + trig.blend_alpha * noise, 0.0, 1.0)
    # sinusoid added per column, constant over rows and channels
    cols = np.arange(w, dtype=np.float32)
    wave = trig.sig_delta * np.sin(2.0 * np.pi * cols * trig.sig_freq / w)
    return np.clip(image + wave[None, None, :], 0.0, 1.0).astype(np.float32)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def poison_train(train: Dataset, trig: TriggerSpec, policy: PoisonPolicy) -> Dataset:
    """Stamp and relabel round(rate*N) uniformly chosen samples."""
    if train.poison_flags.any():
        raise ValueError("training set already carries poison flags")
    n = len(train)
    k = train.num_classes
    if policy.target_label >= k:
        raise ValueError(f"target label {policy.target_label} outside [0,{k})")
    count = _round_half_up(policy.rate * n)
    rng = np.random.default_rng([policy.seed, 0xA01])
    chosen = rng.choice(n, size=count, replace=False) if count else np.empty(0, dtype=np.int64)

    out = Dataset(
        images=train.images.copy(),
        labels=train.labels.copy(),
        poison_flags=np.zeros(n, dtype=bool),
        meta=dict(train.meta),
    )
    for i in np.sort(chosen):
        out.images[i] = apply_trigger(out.images[i], trig)
        if policy.mode == MODE_ALL_TO_ONE:
            out.labels[i] = policy.target_label
        else:
            out.labels[i] = (out.labels[i] + 1) % k
        out.poison_flags[i] = True
    out.meta["trigger"] = trig.describe()
    out.meta["poison"] = {
        "rate": policy.rate,
        "target_label": policy.target_label,
        "mode": policy.mode,
        "seed": policy.seed,
        "count": int(count),
    }
    return out


def build_asr_testset(test: Dataset, trig: TriggerSpec, target_label: int) -> Dataset:
    """Trigger-stamped test set relabeled to the target, excluding true-target samples."""
    if test.poison_flags.any():
        raise ValueError("ASR test source must be clean")
    keep = np.flatnonzero(test.labels != target_label)
    if keep.size == 0:
        raise ValueError("no samples left after removing the target class")
    images = np.stack([apply_trigger(test.images[i], trig) for i in keep])
    out = Dataset(
        images=images,
        labels=np.full(keep.size, target_label, dtype=np.int64),
        poison_flags=np.ones(keep.size, dtype=bool),
        meta=dict(test.meta),
    )
    out.meta["trigger"] = trig.describe()
    out.meta["asr_target"] = int(target_label)
    return out


def sample_defense(source: Dataset, n: int, seed: int) -> Dataset:
    """Class-stratified clean sample of size n (quota n//K per class, the
    remainder spread over the lowest class indices)."""
    if source.poison_flags.any():
        raise ValueError("defense data must be sampled from clean samples only")
    if n < 1:
        raise ValueError("defense size must be >= 1")
    if n > len(source):
        raise ValueError(f"requested {n} defense samples from {len(source)} available")
    k = source.num_classes
    rng = np.random.default_rng([seed, 0xDEF])
    quotas = [n // k + (1 if c < n % k else 0) for c in range(k)]
    picked = []
    for c, quota in enumerate(quotas):
        pool = np.flatnonzero(source.labels == c)
        if quota > pool.size:
            raise ValueError(
                f"class {c} has {pool.size} clean samples, cannot satisfy quota {quota}"
            )
        if quota:
            picked.append(rng.choice(pool, size=quota, replace=False))
    idx = np.sort(np.concatenate(picked))
    out = source.subset(idx)
    out.meta["defense"] = {"size": n, "seed": seed}
    return out
