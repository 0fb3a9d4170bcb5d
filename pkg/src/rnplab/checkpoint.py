"""On-disk formats: checkpoint directories, dataset dumps, and mask files.

Everything is little-endian and accompanied by a manifest.json carrying
shapes, ordering, and content hashes, so a round trip is byte-identical and
corruption is detected on load.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import Dataset
from .masks import UnitMask
from .model import ModelSpec, ParameterStore

SCHEMA_VERSION = "1"


class CheckpointError(RuntimeError):
    """Missing, truncated, or corrupted artifact files."""


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise CheckpointError(f"missing manifest: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def save_checkpoint(store: ParameterStore, path, spec: ModelSpec | None = None, seed: int | None = None) -> Path:
    """Write manifest.json + params.bin (concatenated row-major f32le)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name in store.names():
        raw = np.ascontiguousarray(store[name], dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "role": store.roles[name],
                "shape": list(store[name].shape),
                "offset": offset,
            }
        )
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    (path / "params.bin").write_bytes(payload)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dtype": "f32le",
        "spec": spec.to_dict() if spec is not None else None,
        "seed": seed,
        "tensors": entries,
        "params_bytes": len(payload),
        "params_sha256": _sha256(payload),
    }
    _write_json(path / "manifest.json", manifest)
    return path


def read_manifest(path) -> dict:
    return _read_json(Path(path) / "manifest.json")


def load_checkpoint(path) -> ParameterStore:
    """Read a checkpoint directory back; hash and length are verified."""
    path = Path(path)
    manifest = _read_json(path / "manifest.json")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema: {manifest.get('schema_version')!r}")
    bin_path = path / "params.bin"
    if not bin_path.exists():
        raise CheckpointError(f"missing params.bin in {path}")
    payload = bin_path.read_bytes()
    if len(payload) != manifest["params_bytes"]:
        raise CheckpointError(
            f"params.bin has {len(payload)} bytes, manifest says {manifest['params_bytes']}"
        )
    if _sha256(payload) != manifest["params_sha256"]:
        raise CheckpointError(f"params.bin hash mismatch in {path}")
    store = ParameterStore()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        store.add(entry["name"], entry["role"], arr.copy())
    return store


def checkpoint_spec(path) -> ModelSpec:
    manifest = read_manifest(path)
    if not manifest.get("spec"):
        raise CheckpointError(f"checkpoint {path} carries no spec description")
    return ModelSpec.from_dict(manifest["spec"])


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes()
    flags = np.ascontiguousarray(ds.poison_flags, dtype=np.uint8).tobytes()
    (path / "images.bin").write_bytes(images)
    (path / "labels.bin").write_bytes(labels)
    (path / "flags.bin").write_bytes(flags)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "count": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "meta": ds.meta,
        "images_sha256": _sha256(images),
        "labels_sha256": _sha256(labels),
        "flags_sha256": _sha256(flags),
    }
    _write_json(path / "manifest.json", manifest)
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = _read_json(path / "manifest.json")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported dataset schema: {manifest.get('schema_version')!r}")
    n = int(manifest["count"])
    shape = tuple(manifest["image_shape"])
    blobs = {}
    for stem, digest_key in (
        ("images", "images_sha256"),
        ("labels", "labels_sha256"),
        ("flags", "flags_sha256"),
    ):
        raw = (path / f"{stem}.bin").read_bytes()
        if _sha256(raw) != manifest[digest_key]:
            raise CheckpointError(f"{stem}.bin hash mismatch in {path}")
        blobs[stem] = raw
    images = np.frombuffer(blobs["images"], dtype="<f4").reshape((n, *shape)).copy()
    labels = np.frombuffer(blobs["labels"], dtype=np.uint8).astype(np.int64)
    flags = np.frombuffer(blobs["flags"], dtype=np.uint8).astype(bool)
    return Dataset(images=images, labels=labels, poison_flags=flags, meta=manifest.get("meta", {}))


def save_mask(mask: UnitMask, directory, stem: str = "mask") -> Path:
    """Write <stem>.bin (f32le values) + <stem>_manifest.json into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(mask.values, dtype="<f4").tobytes()
    (directory / f"{stem}.bin").write_bytes(raw)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "granularity": mask.granularity,
        "layer_sizes": {k: int(v) for k, v in mask.layer_sizes.items()},
        "mask_sha256": _sha256(raw),
    }
    _write_json(directory / f"{stem}_manifest.json", manifest)
    return directory


def load_mask(directory, stem: str = "mask") -> UnitMask:
    directory = Path(directory)
    manifest = _read_json(directory / f"{stem}_manifest.json")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported mask schema: {manifest.get('schema_version')!r}")
    raw = (directory / f"{stem}.bin").read_bytes()
    if _sha256(raw) != manifest["mask_sha256"]:
        raise CheckpointError(f"{stem}.bin hash mismatch in {directory}")
    values = np.frombuffer(raw, dtype="<f4").copy()
    return UnitMask(manifest["granularity"], dict(manifest["layer_sizes"]), values)
