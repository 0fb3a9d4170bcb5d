"""Model specification, named parameter stores, and deterministic initialization.

The reference architecture family is a stack of conv(3x3, pad 1) + batchnorm +
relu blocks with 2x2 max pooling between blocks, global average pooling after
the last block, and a final linear classifier. Every conv output channel is a
prunable filter and is listed in the spec's filter registry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROLE_CONV_KERNEL = "conv-kernel"
ROLE_CONV_BIAS = "conv-bias"
ROLE_BN_SCALE = "bn-scale"
ROLE_BN_SHIFT = "bn-shift"
ROLE_BN_RUNNING_MEAN = "bn-running-mean"
ROLE_BN_RUNNING_VAR = "bn-running-var"
ROLE_FC_WEIGHT = "fc-weight"
ROLE_FC_BIAS = "fc-bias"

VALID_ROLES = frozenset(
    {
        ROLE_CONV_KERNEL,
        ROLE_CONV_BIAS,
        ROLE_BN_SCALE,
        ROLE_BN_SHIFT,
        ROLE_BN_RUNNING_MEAN,
        ROLE_BN_RUNNING_VAR,
        ROLE_FC_WEIGHT,
        ROLE_FC_BIAS,
    }
)

# Running statistics are buffers, not optimized variables.
TRAINABLE_ROLES = frozenset(
    {
        ROLE_CONV_KERNEL,
        ROLE_CONV_BIAS,
        ROLE_BN_SCALE,
        ROLE_BN_SHIFT,
        ROLE_FC_WEIGHT,
        ROLE_FC_BIAS,
    }
)


@dataclass(frozen=True)
class FilterRef:
    """One prunable conv output channel: (layer id, channel index within layer)."""

    layer_id: str
    channel: int


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: input shape, conv widths, and class count."""

    name: str
    num_classes: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    conv_channels: tuple[int, ...]
    kernel_size: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be 3 positive dims, got {self.input_shape}")
        if not self.conv_channels or any(w < 1 for w in self.conv_channels):
            raise ValueError(f"conv widths must be positive, got {self.conv_channels}")
        h, w = self.input_shape[1], self.input_shape[2]
        # one 2x2 max pool between consecutive conv blocks
        for _ in range(len(self.conv_channels) - 1):
            if h < 2 or w < 2:
                raise ValueError("input too small for the pooling stack")
            h, w = h // 2, w // 2

    @property
    def num_blocks(self) -> int:
        return len(self.conv_channels)

    def layer_ids(self) -> list[str]:
        return [f"conv{i + 1}" for i in range(self.num_blocks)]

    def block_input_channels(self, block: int) -> int:
        return self.input_shape[0] if block == 0 else self.conv_channels[block - 1]

    def block_spatial(self, block: int) -> tuple[int, int]:
        """(H, W) of the block's conv output (before its trailing pool)."""
        h, w = self.input_shape[1], self.input_shape[2]
        for _ in range(block):
            h, w = h // 2, w // 2
        return h, w

    def filter_registry(self) -> list[FilterRef]:
        """Ordered list of all prunable conv filters."""
        refs = []
        for lid, width in zip(self.layer_ids(), self.conv_channels):
            refs.extend(FilterRef(lid, c) for c in range(width))
        return refs

    @property
    def num_filters(self) -> int:
        return int(sum(self.conv_channels))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            name=d["name"],
            num_classes=int(d["num_classes"]),
            input_shape=tuple(int(x) for x in d["input_shape"]),
            conv_channels=tuple(int(x) for x in d["conv_channels"]),
            kernel_size=int(d.get("kernel_size", 3)),
        )


def small_convnet(num_classes: int = 10) -> ModelSpec:
    """Reference 3-block classifier for 3x32x32 inputs (112 prunable filters)."""
    return ModelSpec(
        name="small-convnet",
        num_classes=num_classes,
        input_shape=(3, 32, 32),
        conv_channels=(16, 32, 64),
    )


def tiny_convnet() -> ModelSpec:
    """Minimal 2-block net used by the gradient checker (7 filters, K=3)."""
    return ModelSpec(
        name="tiny-convnet",
        num_classes=3,
        input_shape=(2, 6, 6),
        conv_channels=(3, 4),
    )


@dataclass
class ParameterStore:
    """Ordered map of named float32 tensors, each tagged with a role."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, role: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate tensor name: {name}")
        if role not in VALID_ROLES:
            raise ValueError(f"unknown role {role!r} for tensor {name}")
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name}")
        self.tensors[name] = arr
        self.roles[name] = role

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, arr in self.tensors.items():
            out.tensors[name] = arr.copy()
            out.roles[name] = self.roles[name]
        return out

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if self.roles[n] in TRAINABLE_ROLES]

    def identical(self, other: "ParameterStore") -> bool:
        """Byte-level equality of names, roles, and tensor contents."""
        if self.names() != other.names() or self.roles != other.roles:
            return False
        return all(
            self.tensors[n].shape == other.tensors[n].shape
            and self.tensors[n].tobytes() == other.tensors[n].tobytes()
            for n in self.tensors
        )

    def allclose(self, other: "ParameterStore", atol: float = 0.0, rtol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.allclose(self.tensors[n], other.tensors[n], atol=atol, rtol=rtol)
            for n in self.tensors
        )


def expected_shapes(spec: ModelSpec) -> dict[str, tuple[tuple[int, ...], str]]:
    """name -> (shape, role) for every tensor the spec requires, in order."""
    k = spec.kernel_size
    out: dict[str, tuple[tuple[int, ...], str]] = {}
    for i, lid in enumerate(spec.layer_ids()):
        c_in = spec.block_input_channels(i)
        c_out = spec.conv_channels[i]
        out[f"{lid}.weight"] = ((c_out, c_in, k, k), ROLE_CONV_KERNEL)
        out[f"{lid}.bias"] = ((c_out,), ROLE_CONV_BIAS)
        out[f"bn{i + 1}.scale"] = ((c_out,), ROLE_BN_SCALE)
        out[f"bn{i + 1}.shift"] = ((c_out,), ROLE_BN_SHIFT)
        out[f"bn{i + 1}.running_mean"] = ((c_out,), ROLE_BN_RUNNING_MEAN)
        out[f"bn{i + 1}.running_var"] = ((c_out,), ROLE_BN_RUNNING_VAR)
    out["fc.weight"] = ((spec.num_classes, spec.conv_channels[-1]), ROLE_FC_WEIGHT)
    out["fc.bias"] = ((spec.num_classes,), ROLE_FC_BIAS)
    return out


def validate_store(spec: ModelSpec, store: ParameterStore) -> None:
    """Check the store carries exactly the spec's tensors with legal values."""
    expect = expected_shapes(spec)
    if store.names() != list(expect.keys()):
        raise ValueError(
            f"store names do not match spec {spec.name}: "
            f"got {store.names()}, want {list(expect.keys())}"
        )
    for name, (shape, role) in expect.items():
        arr = store[name]
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape}, want {shape}")
        if store.roles[name] != role:
            raise ValueError(f"{name}: role {store.roles[name]!r}, want {role!r}")
        if role == ROLE_BN_RUNNING_VAR and not np.all(arr > 0):
            raise ValueError(f"{name}: running variance must stay strictly positive")


def build_model(spec: ModelSpec, seed: int) -> ParameterStore:
    """Deterministic init: fan-in-scaled normal kernels, neutral batchnorm.

    The same (spec, seed) pair always yields a byte-identical store.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, (shape, role) in expected_shapes(spec).items():
        if role == ROLE_CONV_KERNEL:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        elif role == ROLE_FC_WEIGHT:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        elif role in (ROLE_BN_SCALE, ROLE_BN_RUNNING_VAR):
            arr = np.ones(shape)
        else:  # biases, bn shift, running mean
            arr = np.zeros(shape)
        store.add(name, role, arr.astype(np.float32))
    validate_store(spec, store)
    return store
