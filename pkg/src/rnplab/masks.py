"""Multiplicative unit masks over conv filters or individual kernel weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, expected_shapes

GRANULARITY_FILTER = "filter"
GRANULARITY_NEURON = "neuron"


@dataclass
class UnitMask:
    """Flat [0,1] mask aligned to a subset of conv layers.

    ``filter`` granularity carries one value per conv output channel; that
    value scales the whole filter (kernel slice and bias). ``neuron``
    granularity carries one value per individual kernel weight; biases are
    left unscaled.
    """

    granularity: str
    layer_sizes: dict[str, int]  # layer id -> number of mask entries, in layer order
    values: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.granularity not in (GRANULARITY_FILTER, GRANULARITY_NEURON):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        total = sum(self.layer_sizes.values())
        if self.values is None:
            self.values = np.ones(total, dtype=np.float32)
        else:
            self.values = np.asarray(self.values, dtype=np.float32).ravel()
        if self.values.size != total:
            raise ValueError(
                f"mask has {self.values.size} values, layer map wants {total}"
            )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def layer_slice(self, layer_id: str) -> slice:
        off = 0
        for lid, n in self.layer_sizes.items():
            if lid == layer_id:
                return slice(off, off + n)
            off += n
        raise KeyError(f"layer {layer_id!r} not covered by this mask")

    def layer_values(self, layer_id: str) -> np.ndarray:
        return self.values[self.layer_slice(layer_id)]

    def copy(self) -> "UnitMask":
        return UnitMask(self.granularity, dict(self.layer_sizes), self.values.copy())

    def clip_(self) -> None:
        np.clip(self.values, 0.0, 1.0, out=self.values)

    def in_range(self) -> bool:
        return bool(np.all(self.values >= 0.0) and np.all(self.values <= 1.0))

    def histogram(self, bins: int = 10) -> list[int]:
        counts, _ = np.histogram(self.values, bins=bins, range=(0.0, 1.0))
        return [int(c) for c in counts]


def _subset_layers(spec: ModelSpec, layer_subset: list[str] | None) -> list[str]:
    all_ids = spec.layer_ids()
    if layer_subset is None:
        return all_ids
    if not layer_subset:
        raise ValueError("layer subset must not be empty")
    unknown = [lid for lid in layer_subset if lid not in all_ids]
    if unknown:
        raise ValueError(f"unknown conv layers in subset: {unknown}")
    # keep architectural order regardless of how the subset was written
    return [lid for lid in all_ids if lid in layer_subset]


def ones_mask(
    spec: ModelSpec,
    granularity: str = GRANULARITY_FILTER,
    layer_subset: list[str] | None = None,
) -> UnitMask:
    """All-ones mask over the requested conv layers."""
    layers = _subset_layers(spec, layer_subset)
    shapes = expected_shapes(spec)
    sizes: dict[str, int] = {}
    for lid in layers:
        kshape = shapes[f"{lid}.weight"][0]
        if granularity == GRANULARITY_FILTER:
            sizes[lid] = kshape[0]
        elif granularity == GRANULARITY_NEURON:
            sizes[lid] = int(np.prod(kshape))
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
    return UnitMask(granularity, sizes)


def registry_indices(spec: ModelSpec, mask: UnitMask) -> np.ndarray:
    """Global filter-registry index for each entry of a filter mask."""
    if mask.granularity != GRANULARITY_FILTER:
        raise ValueError("registry indices are defined for filter masks only")
    layer_offset = {}
    off = 0
    for lid, width in zip(spec.layer_ids(), spec.conv_channels):
        layer_offset[lid] = off
        off += width
    idx = []
    for lid, n in mask.layer_sizes.items():
        idx.extend(range(layer_offset[lid], layer_offset[lid] + n))
    return np.asarray(idx, dtype=np.int64)
