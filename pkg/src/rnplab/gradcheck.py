"""Verification of analytic gradients against central finite differences.

The finite-difference side recomputes the loss from scratch at perturbed
parameter values in 64-bit precision; it never touches the backward path it
is checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .masks import GRANULARITY_FILTER, GRANULARITY_NEURON, UnitMask, ones_mask
from .model import ModelSpec, ParameterStore, build_model, tiny_convnet
from .nets import Batch, forward_torch, loss_and_grads, torch_params


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tolerance: float
    groups: dict[str, float] = field(default_factory=dict)


def _loss_f64(
    spec: ModelSpec,
    store: ParameterStore,
    batch: Batch,
    mode: str,
    mask: UnitMask | None,
    mask_values: np.ndarray | None,
) -> float:
    t = {k: v.to(torch.float64).clone() for k, v in torch_params(store).items()}
    mv = None
    if mask is not None:
        mv = torch.from_numpy(np.asarray(mask_values, dtype=np.float64))
    with torch.no_grad():
        logits = forward_torch(
            spec,
            t,
            torch.from_numpy(batch.images).to(torch.float64),
            training=(mode == "train"),
            mask=mask,
            mask_values=mv,
        )
        loss = F.cross_entropy(logits, torch.from_numpy(batch.labels))
    return float(loss.item())


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-6, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def _loss_with_f64_param(spec, store, batch, mode, name, flat_index, value) -> float:
    t = {k: v.to(torch.float64).clone() for k, v in torch_params(store).items()}
    t[name].view(-1)[flat_index] = value
    with torch.no_grad():
        logits = forward_torch(
            spec,
            t,
            torch.from_numpy(batch.images).to(torch.float64),
            training=(mode == "train"),
        )
        loss = F.cross_entropy(logits, torch.from_numpy(batch.labels))
    return float(loss.item())


def gradient_check(
    spec: ModelSpec | None = None,
    seed: int = 1,
    tolerance: float = 1e-4,
    corrupt_hook=None,
) -> GradCheckReport:
    """Compare analytic gradients with 64-bit central differences.

    Covers trainable parameters under both batchnorm modes and mask gradients
    at both granularities. ``corrupt_hook(group, analytic) -> analytic`` is a
    test-only hook for negative controls.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if spec is None:
        spec = tiny_convnet()
    rng = np.random.default_rng(seed)
    store = build_model(spec, seed)
    # move away from the symmetric init so gradients are generic
    for name in store.names():
        role = store.roles[name]
        if role == "bn-running-var":
            store.tensors[name] = (store[name] * rng.uniform(0.5, 1.5, store[name].shape)).astype(
                np.float32
            )
        elif role == "bn-running-mean":
            store.tensors[name] = rng.normal(0, 0.1, store[name].shape).astype(np.float32)
        else:
            store.tensors[name] = (
                store[name] + rng.normal(0, 0.05, store[name].shape)
            ).astype(np.float32)

    batch = Batch(
        images=rng.random((2, *spec.input_shape), dtype=np.float32),
        labels=rng.integers(0, spec.num_classes, size=2),
    )
    h = 1e-5

    def masked(granularity: str) -> UnitMask:
        m = ones_mask(spec, granularity)
        m.values = rng.uniform(0.2, 0.9, m.size).astype(np.float32)
        return m

    groups: dict[str, float] = {}
    groups["parameters/train"] = _check_param_group(spec, store, batch, "train", h, corrupt_hook)
    groups["parameters/eval"] = _check_param_group(spec, store, batch, "eval", h, corrupt_hook)
    for granularity in (GRANULARITY_FILTER, GRANULARITY_NEURON):
        for mode in ("eval", "train") if granularity == GRANULARITY_FILTER else ("eval",):
            label = f"mask-{granularity}/{mode}"
            m = masked(granularity)
            err = _check_mask_group(spec, store, batch, m, mode, h, corrupt_hook, label)
            groups[label] = err

    worst = max(groups.values())
    return GradCheckReport(
        max_rel_err=worst, passed=worst <= tolerance, tolerance=tolerance, groups=groups
    )


def _check_param_group(spec, store, batch, mode, h, corrupt_hook) -> float:
    _, grads = loss_and_grads(spec, store, batch, wrt="parameters", mode=mode, precision="f64")
    if corrupt_hook is not None:
        grads = corrupt_hook(f"parameters/{mode}", grads)
    worst = 0.0
    for name in store.trainable_names():
        base = store[name].astype(np.float64).ravel()
        numeric = np.zeros_like(base)
        for i in range(base.size):
            lp = _loss_with_f64_param(spec, store, batch, mode, name, i, base[i] + h)
            lm = _loss_with_f64_param(spec, store, batch, mode, name, i, base[i] - h)
            numeric[i] = (lp - lm) / (2 * h)
        worst = max(worst, _rel_err(grads[name].astype(np.float64).ravel(), numeric))
    return worst


def _check_mask_group(spec, store, batch, mask, mode, h, corrupt_hook, label) -> float:
    _, grad = loss_and_grads(spec, store, batch, wrt="mask", mask=mask, mode=mode, precision="f64")
    if corrupt_hook is not None:
        grad = corrupt_hook(label, grad)
    base = mask.values.astype(np.float64)
    numeric = np.zeros_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (
            _loss_f64(spec, store, batch, mode, mask, up)
            - _loss_f64(spec, store, batch, mode, mask, down)
        ) / (2 * h)
    return _rel_err(grad.astype(np.float64), numeric)
