"""Forward, loss/gradient, and mask-application operations for the conv family.

All public operations are pure: parameter stores passed in are never mutated,
and train-mode batchnorm statistics are computed on private copies. Training
loops that need running-statistic updates own their mutable tensor dicts and
use the internal ``torch_params`` / ``forward_torch`` pair directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .masks import GRANULARITY_FILTER, GRANULARITY_NEURON, UnitMask
from .model import ModelSpec, ParameterStore, expected_shapes

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericError(RuntimeError):
    """Non-finite values encountered during computation."""


@dataclass
class Batch:
    """Images in [0,1] with integer labels in [0, K)."""

    images: np.ndarray  # [B, C, H, W] float32
    labels: np.ndarray  # [B] int64

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [B,C,H,W], got shape {self.images.shape}")
        if self.images.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels length must match batch size")
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")

    @property
    def size(self) -> int:
        return int(self.images.shape[0])


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if tuple(batch.images.shape[1:]) != spec.input_shape:
        raise ValueError(
            f"batch images {batch.images.shape[1:]} do not match spec input {spec.input_shape}"
        )
    if int(batch.labels.max(initial=0)) >= spec.num_classes:
        raise ValueError("labels exceed the spec's class count")


def check_mask_layout(spec: ModelSpec, mask: UnitMask) -> None:
    shapes = expected_shapes(spec)
    for lid, n in mask.layer_sizes.items():
        key = f"{lid}.weight"
        if key not in shapes:
            raise ValueError(f"mask references unknown layer {lid!r}")
        kshape = shapes[key][0]
        want = kshape[0] if mask.granularity == GRANULARITY_FILTER else int(np.prod(kshape))
        if n != want:
            raise ValueError(
                f"mask layer {lid}: {n} values, spec wants {want} at {mask.granularity} granularity"
            )


def torch_params(
    store: ParameterStore,
    dtype: torch.dtype = torch.float32,
    copy_stats: bool = False,
) -> dict[str, torch.Tensor]:
    """Tensor views of the store. ``copy_stats`` detaches batchnorm buffers so
    train-mode statistic updates cannot leak back into the numpy store."""
    out: dict[str, torch.Tensor] = {}
    for name, arr in store.tensors.items():
        t = torch.from_numpy(arr)
        if dtype != torch.float32:
            t = t.to(dtype)
        elif copy_stats and store.roles[name] in ("bn-running-mean", "bn-running-var"):
            t = t.clone()
        out[name] = t
    return out


def store_from_torch(template: ParameterStore, tensors: dict[str, torch.Tensor]) -> ParameterStore:
    out = ParameterStore()
    for name in template.names():
        arr = tensors[name].detach().to(torch.float32).numpy().copy()
        out.add(name, template.roles[name], arr)
    return out


def _apply_mask_to_layer(
    w: torch.Tensor,
    b: torch.Tensor,
    mask: UnitMask,
    mask_values: torch.Tensor,
    layer_id: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    if layer_id not in mask.layer_sizes:
        return w, b
    mv = mask_values[mask.layer_slice(layer_id)]
    if mask.granularity == GRANULARITY_FILTER:
        return w * mv.view(-1, 1, 1, 1), b * mv
    return w * mv.view_as(w), b


def forward_torch(
    spec: ModelSpec,
    t: dict[str, torch.Tensor],
    x: torch.Tensor,
    training: bool,
    mask: UnitMask | None = None,
    mask_values: torch.Tensor | None = None,
    check_finite: bool = False,
) -> torch.Tensor:
    """Masked forward pass on torch tensors. Train mode updates the running
    statistics held in ``t`` in place (momentum 0.1)."""
    pad = spec.kernel_size // 2
    for i, lid in enumerate(spec.layer_ids()):
        w, b = t[f"{lid}.weight"], t[f"{lid}.bias"]
        if mask is not None:
            w, b = _apply_mask_to_layer(w, b, mask, mask_values, lid)
        x = F.conv2d(x, w, b, padding=pad)
        x = F.batch_norm(
            x,
            t[f"bn{i + 1}.running_mean"],
            t[f"bn{i + 1}.running_var"],
            t[f"bn{i + 1}.scale"],
            t[f"bn{i + 1}.shift"],
            training=training,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )
        x = F.relu(x)
        if check_finite and not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations after block {lid}")
        if i < spec.num_blocks - 1:
            x = F.max_pool2d(x, 2)
    x = x.mean(dim=(2, 3))
    logits = F.linear(x, t["fc.weight"], t["fc.bias"])
    if check_finite and not torch.isfinite(logits).all():
        raise NumericError("non-finite logits at fc")
    return logits


def forward(
    spec: ModelSpec,
    params: ParameterStore,
    batch: Batch,
    mode: str = "eval",
    mask: UnitMask | None = None,
) -> np.ndarray:
    """Logits [B, K]. ``eval`` uses frozen running statistics; ``train`` uses
    batch statistics (on private stat copies, so the store stays untouched)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_batch(spec, batch)
    mv = None
    if mask is not None:
        check_mask_layout(spec, mask)
        mv = torch.from_numpy(mask.values)
    t = torch_params(params, copy_stats=(mode == "train"))
    with torch.no_grad():
        logits = forward_torch(
            spec,
            t,
            torch.from_numpy(batch.images),
            training=(mode == "train"),
            mask=mask,
            mask_values=mv,
            check_finite=True,
        )
    return logits.numpy()


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stabilized."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grads(
    spec: ModelSpec,
    params: ParameterStore,
    batch: Batch,
    wrt: str = "parameters",
    mask: UnitMask | None = None,
    mode: str = "train",
    precision: str = "f32",
):
    """Mean cross-entropy and its gradient.

    ``wrt='parameters'`` returns a name->array dict over the trainable tensors;
    ``wrt='mask'`` returns a flat array aligned with ``mask.values`` (the mask
    argument is required). ``precision='f64'`` runs the whole graph in 64-bit
    for verification work.
    """
    if wrt not in ("parameters", "mask"):
        raise ValueError(f"wrt must be 'parameters' or 'mask', got {wrt!r}")
    if wrt == "mask" and mask is None:
        raise ValueError("wrt='mask' requires a mask argument")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_batch(spec, batch)
    dtype = torch.float64 if precision == "f64" else torch.float32

    t = torch_params(params, dtype=dtype, copy_stats=True)
    if dtype == torch.float64:
        t = {k: v.clone() for k, v in t.items()}

    mv = None
    if mask is not None:
        check_mask_layout(spec, mask)
        mv = torch.from_numpy(mask.values).to(dtype)

    leaves: dict[str, torch.Tensor] = {}
    if wrt == "parameters":
        for name in params.trainable_names():
            t[name] = t[name].clone().requires_grad_(True)
            leaves[name] = t[name]
    else:
        mv = mv.clone().requires_grad_(True)

    x = torch.from_numpy(batch.images).to(dtype)
    y = torch.from_numpy(batch.labels)
    logits = forward_torch(spec, t, x, training=(mode == "train"), mask=mask, mask_values=mv)
    loss = F.cross_entropy(logits, y)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    loss.backward()

    if wrt == "parameters":
        grads = {}
        for name, leaf in leaves.items():
            g = leaf.grad
            grads[name] = (
                np.zeros(leaf.shape, dtype=np.float32)
                if g is None
                else g.to(torch.float64 if precision == "f64" else torch.float32).numpy().copy()
            )
        return float(loss.item()), grads
    g = mv.grad
    gvals = np.zeros_like(mask.values) if g is None else g.numpy().copy()
    return float(loss.item()), gvals.astype(np.float64 if precision == "f64" else np.float32)


def sgd_step(variables, grads, lr: float, weight_decay: float = 0.0, direction: str = "descend"):
    """Plain SGD update (no momentum); weight decay always pulls toward zero.

    descend: v <- v - lr*(g + wd*v);  ascend: v <- v + lr*g - lr*wd*v.
    Accepts a name->array dict or a single array; returns the same kind.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    sign = -1.0 if direction == "descend" else 1.0

    def one(name, v, g):
        v = np.asarray(v, dtype=np.float32)
        g = np.asarray(g, dtype=np.float32)
        if g.shape != v.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        return v + sign * lr * g - lr * weight_decay * v

    if isinstance(variables, dict):
        missing = set(variables) - set(grads)
        if missing:
            raise ValueError(f"missing gradients for {sorted(missing)}")
        return {name: one(name, v, grads[name]) for name, v in variables.items()}
    return one("value", variables, grads)


def apply_filter_mask(params: ParameterStore, mask: UnitMask) -> ParameterStore:
    """Bake a filter mask into a copy of the store: kernel slices and biases of
    each masked filter are scaled by the filter's mask value."""
    if mask.granularity != GRANULARITY_FILTER:
        raise ValueError("apply_filter_mask requires filter granularity")
    out = params.copy()
    for lid, n in mask.layer_sizes.items():
        wname, bname = f"{lid}.weight", f"{lid}.bias"
        if wname not in out or out[wname].shape[0] != n:
            raise ValueError(f"mask layer {lid} does not match the store layout")
        mv = mask.layer_values(lid)
        out.tensors[wname] = out[wname] * mv[:, None, None, None]
        out.tensors[bname] = out[bname] * mv
    return out


def apply_neuron_mask(params: ParameterStore, mask: UnitMask) -> ParameterStore:
    """Bake a per-weight mask into a copy of the store (biases untouched)."""
    if mask.granularity != GRANULARITY_NEURON:
        raise ValueError("apply_neuron_mask requires neuron granularity")
    out = params.copy()
    for lid, n in mask.layer_sizes.items():
        wname = f"{lid}.weight"
        if wname not in out or out[wname].size != n:
            raise ValueError(f"mask layer {lid} does not match the store layout")
        mv = mask.layer_values(lid).reshape(out[wname].shape)
        out.tensors[wname] = out[wname] * mv
    return out


def emit_feature_maps(
    spec: ModelSpec,
    params: ParameterStore,
    image: np.ndarray,
    layer_id: str,
    path=None,
) -> np.ndarray:
    """Channel-wise mean of a conv block's post-relu activations (eval mode,
    before that block's pooling). Optionally written to ``path`` as CSV."""
    if layer_id not in spec.layer_ids():
        raise ValueError(f"unknown conv layer {layer_id!r}")
    image = np.ascontiguousarray(image, dtype=np.float32)
    if image.shape != spec.input_shape:
        raise ValueError(f"image shape {image.shape} does not match spec {spec.input_shape}")

    t = torch_params(params)
    x = torch.from_numpy(image[None])
    pad = spec.kernel_size // 2
    with torch.no_grad():
        for i, lid in enumerate(spec.layer_ids()):
            x = F.conv2d(x, t[f"{lid}.weight"], t[f"{lid}.bias"], padding=pad)
            x = F.batch_norm(
                x,
                t[f"bn{i + 1}.running_mean"],
                t[f"bn{i + 1}.running_var"],
                t[f"bn{i + 1}.scale"],
                t[f"bn{i + 1}.shift"],
                training=False,
                eps=BN_EPS,
            )
            x = F.relu(x)
            if lid == layer_id:
                fmap = x[0].mean(dim=0).numpy().copy()
                if path is not None:
                    np.savetxt(path, fmap, delimiter=",", fmt="%.8e")
                return fmap
            if i < spec.num_blocks - 1:
                x = F.max_pool2d(x, 2)
    raise AssertionError("unreachable")
