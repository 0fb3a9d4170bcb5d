"""Experiment orchestration: configs, end-to-end runs, sweeps, and tables.

Every artifact directory is self-describing: the echoed config, tool version,
and derived stage seeds are enough to reproduce the run byte-for-byte (up to
the wall-clock field of report.json).
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__
from .checkpoint import save_checkpoint, save_dataset, save_mask
from .data import (
    Dataset,
    PoisonPolicy,
    TriggerSpec,
    build_asr_testset,
    gen_synth,
    load_cifar10,
    poison_train,
    sample_defense,
)
from .model import ModelSpec, small_convnet
from .rnp import (
    ExperimentReport,
    PruneConfig,
    RecoverConfig,
    UnlearnConfig,
    run_pipeline,
)
from .seeding import stage_seed
from .train import TrainConfig, train

SCHEMA_VERSION = "1"

SWEEP_AXES = (
    "defense_size",
    "unlearn_epochs",
    "mask_location",
    "trigger_size",
    "poison_rate",
    "threshold",
    "fraction",
)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


def apply_thread_env() -> int:
    """Pin torch to RNP_THREADS (default 1) for deterministic reruns."""
    threads = int(os.environ.get("RNP_THREADS", "1"))
    if threads < 1:
        raise ConfigError("RNP_THREADS: must be a positive integer")
    torch.set_num_threads(threads)
    return threads


def default_config() -> dict:
    """The bundled desk-scale BadNets experiment."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "data": {
            "kind": "synthetic",
            "per_class_train": 500,
            "per_class_test": 200,
            "num_classes": 10,
            "height": 32,
            "width": 32,
        },
        "attack": {
            "trigger": {"kind": "badnets", "patch_size": 3},
            "poison": {"rate": 0.1, "target_label": 0, "mode": "all-to-one"},
        },
        "train": {
            "epochs": 30,
            "batch_size": 128,
            "lr": 0.05,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "milestones": [20],
            "lr_decay": 0.1,
            "augment": True,
        },
        "defense": {"size": 500},
        "unlearn": {
            "lr": 0.05,
            "weight_decay": 0.05,
            "max_epochs": 40,
            "ca_min": None,
            "batch_size": 128,
            "augment": True,
            "collapse_share": 0.9,
        },
        "recover": {
            "lr": 0.2,
            "epochs": 20,
            "granularity": "filter",
            "layer_subset": None,
            "batch_size": 128,
            "augment": True,
        },
        "prune": {"mode": "threshold", "threshold": None, "fraction": None, "ca_budget": 0.02},
    }


def _section(raw: dict, key: str, required: bool = True) -> dict:
    if key not in raw:
        if required:
            raise ConfigError(f"{key}: section missing")
        return {}
    if not isinstance(raw[key], dict):
        raise ConfigError(f"{key}: must be an object")
    return raw[key]


def _build(cls, section: dict, prefix: str, **extra):
    try:
        return cls(**{**section, **extra})
    except TypeError as e:
        raise ConfigError(f"{prefix}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"{prefix}: {e}") from e


@dataclass
class ExperimentConfig:
    seed: int
    data: dict
    trigger: TriggerSpec
    poison: PoisonPolicy
    train_cfg: TrainConfig
    defense_size: int
    unlearn_cfg: UnlearnConfig
    recover_cfg: RecoverConfig
    prune_cfg: PruneConfig
    raw: dict = field(repr=False, default_factory=dict)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version: expected {SCHEMA_VERSION!r}, got {raw.get('schema_version')!r}"
            )
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed: must be a non-negative integer")

        data = _section(raw, "data")
        kind = data.get("kind")
        if kind == "synthetic":
            for key in ("per_class_train", "per_class_test", "num_classes"):
                if not isinstance(data.get(key, 0), int) or data.get(key, 0) < 1:
                    raise ConfigError(f"data.{key}: must be a positive integer")
        elif kind == "cifar10":
            if not data.get("dir"):
                raise ConfigError("data.dir: required for cifar10 data")
        else:
            raise ConfigError(f"data.kind: expected 'synthetic' or 'cifar10', got {kind!r}")

        attack = _section(raw, "attack")
        trigger = _build(
            TriggerSpec,
            _section(attack, "trigger"),
            "attack.trigger",
            pattern_seed=_section(attack, "trigger").get(
                "pattern_seed", stage_seed(seed, "trigger")
            ),
        )
        poison = _build(
            PoisonPolicy,
            _section(attack, "poison"),
            "attack.poison",
            seed=_section(attack, "poison").get("seed", stage_seed(seed, "poison")),
        )

        train_section = dict(_section(raw, "train"))
        if "milestones" in train_section:
            train_section["milestones"] = tuple(train_section["milestones"])
        train_cfg = _build(
            TrainConfig, train_section, "train", seed=train_section.get("seed", stage_seed(seed, "train"))
        )

        defense = _section(raw, "defense")
        size = defense.get("size", 500)
        if not isinstance(size, int) or size < 1:
            raise ConfigError("defense.size: must be a positive integer")

        unlearn_cfg = _build(UnlearnConfig, _section(raw, "unlearn"), "unlearn")
        recover_cfg = _build(RecoverConfig, _section(raw, "recover"), "recover")
        prune_cfg = _build(PruneConfig, _section(raw, "prune"), "prune")

        return ExperimentConfig(
            seed=seed,
            data=data,
            trigger=trigger,
            poison=poison,
            train_cfg=train_cfg,
            defense_size=size,
            unlearn_cfg=unlearn_cfg,
            recover_cfg=recover_cfg,
            prune_cfg=prune_cfg,
            raw=raw,
        )

    @staticmethod
    def load(path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path}: invalid JSON ({e})") from e
        return ExperimentConfig.from_dict(raw)

    def model_spec(self) -> ModelSpec:
        if self.data["kind"] == "synthetic":
            return small_convnet(self.data["num_classes"])
        return small_convnet(10)

    def stage_seeds(self) -> dict:
        return {
            "train_data": stage_seed(self.seed, "train-data"),
            "test_data": stage_seed(self.seed, "test-data"),
            "trigger": self.trigger.pattern_seed,
            "poison": self.poison.seed,
            "defense": stage_seed(self.seed, "defense"),
            "train": self.train_cfg.seed,
        }


@dataclass
class ExperimentData:
    spec: ModelSpec
    train_clean: Dataset
    test_clean: Dataset
    poisoned: Dataset
    asr_test: Dataset
    defense: Dataset


def build_datasets(cfg: ExperimentConfig) -> ExperimentData:
    spec = cfg.model_spec()
    if cfg.data["kind"] == "synthetic":
        train_clean = gen_synth(
            stage_seed(cfg.seed, "train-data"),
            cfg.data["per_class_train"],
            cfg.data["num_classes"],
            cfg.data.get("height", 32),
            cfg.data.get("width", 32),
        )
        test_clean = gen_synth(
            stage_seed(cfg.seed, "test-data"),
            cfg.data["per_class_test"],
            cfg.data["num_classes"],
            cfg.data.get("height", 32),
            cfg.data.get("width", 32),
        )
    else:
        train_clean = load_cifar10(cfg.data["dir"], split="train")
        test_clean = load_cifar10(cfg.data["dir"], split="test")
    poisoned = poison_train(train_clean, cfg.trigger, cfg.poison)
    asr_test = build_asr_testset(test_clean, cfg.trigger, cfg.poison.target_label)
    defense = sample_defense(
        poisoned.clean_portion(), cfg.defense_size, stage_seed(cfg.seed, "defense")
    )
    return ExperimentData(
        spec=spec,
        train_clean=train_clean,
        test_clean=test_clean,
        poisoned=poisoned,
        asr_test=asr_test,
        defense=defense,
    )


def _write_history(history: list[dict], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "acc", "lr"])
        writer.writeheader()
        writer.writerows(history)


def _mark_stage(out: Path, stage: str) -> None:
    (out / "STAGE").write_text(stage + "\n", encoding="utf-8")


def run(config, out_dir, save_data: bool = False) -> Path:
    """Execute data -> attack -> defense pipeline, writing all artifacts.

    On failure the partial artifacts are kept and the STAGE marker names the
    stage that was running.
    """
    apply_thread_env()
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    _mark_stage(out, "data")
    data = build_datasets(cfg)
    if save_data:
        save_dataset(data.poisoned, out / "data" / "poisoned")
        save_dataset(data.test_clean, out / "data" / "test")
        save_dataset(data.defense, out / "data" / "defense")

    _mark_stage(out, "attack-train")
    backdoored, history = train(data.spec, data.poisoned, cfg.train_cfg)
    save_checkpoint(backdoored, out / "backdoored.ckpt", spec=data.spec, seed=cfg.train_cfg.seed)
    _write_history(history, out / "history.csv")

    _mark_stage(out, "pipeline")
    artifacts: dict = {}
    report = run_pipeline(
        data.spec,
        backdoored,
        data.defense,
        cfg.unlearn_cfg,
        cfg.recover_cfg,
        cfg.prune_cfg,
        data.test_clean,
        data.asr_test,
        attack=cfg.trigger.kind,
        seeds=cfg.stage_seeds(),
        artifacts=artifacts,
    )
    save_checkpoint(artifacts["unlearned"], out / "unlearned.ckpt", spec=data.spec)
    save_checkpoint(artifacts["pruned"], out / "pruned.ckpt", spec=data.spec)
    save_mask(artifacts["mask"], out)

    report.configs["experiment"] = cfg.raw
    report.wall_clock_s = time.time() - started
    report.tool_version = __version__
    report.save(out / "report.json")
    render_tables([out / "report.json"], out / "tables.md", out / "tables.csv")
    _mark_stage(out, "done")
    return out


def _axis_value_config(raw: dict, axis: str, value):
    """New raw config with one sweep axis applied."""
    new = json.loads(json.dumps(raw))  # deep copy
    if axis == "defense_size":
        new["defense"]["size"] = int(value)
    elif axis == "unlearn_epochs":
        new["unlearn"]["max_epochs"] = int(value)
        # sweeping the ascent length itself, so stop only on the epoch budget
        new["unlearn"]["ca_min"] = 1e-9
        new["unlearn"]["collapse_share"] = None
    elif axis == "mask_location":
        new["recover"]["layer_subset"] = None if value in (None, "all") else [str(value)]
    elif axis == "trigger_size":
        new["attack"]["trigger"]["patch_size"] = int(value)
    elif axis == "poison_rate":
        new["attack"]["poison"]["rate"] = float(value)
    elif axis == "threshold":
        new["prune"] = {"mode": "threshold", "threshold": float(value), "fraction": None, "ca_budget": new["prune"].get("ca_budget", 0.02)}
    elif axis == "fraction":
        new["prune"] = {"mode": "fraction", "threshold": None, "fraction": float(value), "ca_budget": new["prune"].get("ca_budget", 0.02)}
    else:
        raise ConfigError(f"axis: unknown sweep axis {axis!r}")
    return new


def sweep(config, axis: str, values, out_dir) -> Path:
    """One pipeline run per axis value, sharing seeds and cached stages.

    Stages unaffected by the axis (attack training; unlearning/recovering for
    the pruning axes) run once and are reused across rows.
    """
    apply_thread_env()
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: unknown sweep axis {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("values: sweep needs at least one value")
    base = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    attack_invariant = axis in ("defense_size", "unlearn_epochs", "mask_location", "threshold", "fraction")
    defense_invariant = axis in ("threshold", "fraction")

    cached_model = None
    cached_data = None
    cached_mask = None
    cached_unlearned = None

    rows = []
    for i, value in enumerate(values):
        row_dir = out / f"row_{i:02d}_{value}"
        row_dir.mkdir(parents=True, exist_ok=True)
        try:
            raw = _axis_value_config(base.raw, axis, value)
            cfg = ExperimentConfig.from_dict(raw)
            if attack_invariant and cached_model is not None:
                data, model = cached_data, cached_model
                if axis == "defense_size":
                    data = ExperimentData(
                        spec=data.spec,
                        train_clean=data.train_clean,
                        test_clean=data.test_clean,
                        poisoned=data.poisoned,
                        asr_test=data.asr_test,
                        defense=sample_defense(
                            data.poisoned.clean_portion(), int(value), stage_seed(cfg.seed, "defense")
                        ),
                    )
            else:
                data = build_datasets(cfg)
                model, _ = train(data.spec, data.poisoned, cfg.train_cfg)
                if attack_invariant:
                    cached_data, cached_model = data, model

            if defense_invariant and cached_mask is not None:
                report = _prune_only_report(cfg, data, model, cached_unlearned, cached_mask)
            else:
                artifacts: dict = {}
                report = run_pipeline(
                    data.spec,
                    model,
                    data.defense,
                    cfg.unlearn_cfg,
                    cfg.recover_cfg,
                    cfg.prune_cfg,
                    data.test_clean,
                    data.asr_test,
                    attack=cfg.trigger.kind,
                    seeds=cfg.stage_seeds(),
                    artifacts=artifacts,
                )
                if defense_invariant:
                    cached_mask = artifacts["mask"]
                    cached_unlearned = artifacts["unlearned"]
            report.save(row_dir / "report.json")
            rows.append(
                {
                    "axis": axis,
                    "value": value,
                    "asr": report.metrics_after.asr,
                    "ca": report.metrics_after.ca,
                    "pruned_count": report.pruned_count,
                    "status": "ok",
                }
            )
        except Exception as e:  # noqa: BLE001 - row failures are recorded, not fatal
            (row_dir / "FAILED").write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
            rows.append(
                {"axis": axis, "value": value, "asr": "", "ca": "", "pruned_count": "", "status": "failed"}
            )

    csv_path = out / "sweep.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "asr", "ca", "pruned_count", "status"])
        writer.writeheader()
        writer.writerows(rows)
    return csv_path


def _prune_only_report(cfg, data, model, unlearned, mask) -> ExperimentReport:
    """Re-prune a cached mask under a new prune config (threshold/fraction rows)."""
    from .rnp import (
        fraction_pruned_ids,
        infer_backdoor_label,
        prune_fraction,
        prune_threshold,
        select_dynamic_threshold,
        threshold_pruned_ids,
    )
    from .train import attack_metrics

    metrics_before = attack_metrics(data.spec, model, data.test_clean, data.asr_test)
    label, share = infer_backdoor_label(data.spec, unlearned, data.defense)
    selection = None
    if cfg.prune_cfg.mode == "threshold":
        dt = cfg.prune_cfg.threshold
        if dt is None:
            selection = select_dynamic_threshold(
                data.spec, model, mask, data.defense, cfg.prune_cfg.ca_budget
            )
            dt = selection.dt
        pruned, count = prune_threshold(data.spec, model, mask, dt)
        pruned_ids = threshold_pruned_ids(data.spec, mask, dt)
        threshold, fraction = float(dt), None
    else:
        pruned, count = prune_fraction(data.spec, model, mask, cfg.prune_cfg.fraction)
        pruned_ids = fraction_pruned_ids(data.spec, mask, cfg.prune_cfg.fraction)
        threshold, fraction = None, cfg.prune_cfg.fraction
    metrics_after = attack_metrics(data.spec, pruned, data.test_clean, data.asr_test)
    return ExperimentReport(
        metrics_before=metrics_before,
        metrics_after=metrics_after,
        backdoor_label=label,
        vote_share=share,
        unlearn_epochs_used=-1,
        reached_ca_min=True,
        unlearn_ca_trace=[],
        mask_histogram=mask.histogram(),
        prune_mode=cfg.prune_cfg.mode,
        threshold=threshold,
        fraction=fraction,
        threshold_satisfied=None if selection is None else selection.satisfied,
        threshold_trace=None if selection is None else selection.trace,
        pruned_count=int(count),
        pruned_filter_ids=pruned_ids,
        configs={
            "unlearn": cfg.unlearn_cfg.to_dict(),
            "recover": cfg.recover_cfg.to_dict(),
            "prune": cfg.prune_cfg.to_dict(),
        },
        attack=cfg.trigger.kind,
        seeds=cfg.stage_seeds(),
    )


def prepare(cfg: ExperimentConfig, out: Path) -> tuple[ExperimentData, "object"]:
    """Deterministic data + backdoored model, reusing artifacts in ``out``."""
    from .checkpoint import load_checkpoint

    data = build_datasets(cfg)
    ckpt = out / "backdoored.ckpt"
    if (ckpt / "manifest.json").exists():
        model = load_checkpoint(ckpt)
    else:
        model, history = train(data.spec, data.poisoned, cfg.train_cfg)
        save_checkpoint(model, ckpt, spec=data.spec, seed=cfg.train_cfg.seed)
        _write_history(history, out / "history.csv")
    return data, model


def run_ablation(config, variant: str, out_dir) -> Path:
    """Run one controlled variant end to end and write its report(s)."""
    from .ablations import (
        fine_pruning,
        granularity_matrix,
        learn_incorrectly,
        prune_without_recovering,
        recover_without_unlearning,
    )
    from .rnp import recover, select_dynamic_threshold, prune_threshold, unlearn
    from .train import attack_metrics

    apply_thread_env()
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, model = prepare(cfg, out)
    metrics_before = attack_metrics(data.spec, model, data.test_clean, data.asr_test)

    def finish(payload: dict, name: str) -> Path:
        payload["tool_version"] = __version__
        payload["config"] = cfg.raw
        path = out / name
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return out

    if variant == "matrix":
        reports = granularity_matrix(
            data.spec, model, data.defense, cfg.unlearn_cfg, cfg.recover_cfg, cfg.prune_cfg,
            data.test_clean, data.asr_test,
            probe_image=data.asr_test.images[0], out_dir=out,
        )
        with (out / "matrix.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "asr_before", "ca_before", "asr_after", "ca_after", "pruned"])
            for vid, rep in reports.items():
                writer.writerow(
                    [vid, rep.metrics_before.asr, rep.metrics_before.ca,
                     rep.metrics_after.asr, rep.metrics_after.ca, rep.pruned_count]
                )
        return finish({"variants": {k: v.to_dict() for k, v in reports.items()}}, "ablation_report.json")

    if variant == "recover-wo-unlearn":
        rep = recover_without_unlearning(
            data.spec, model, data.defense, cfg.recover_cfg, cfg.prune_cfg,
            data.test_clean, data.asr_test,
        )
        return finish(rep.to_dict(), "ablation_report.json")

    if variant == "prune-wo-recover":
        ur = unlearn(data.spec, model, data.defense, cfg.unlearn_cfg)
        # q is matched to the pruned count of the standard pipeline
        mask = recover(data.spec, ur.params, data.defense, cfg.recover_cfg)
        sel = select_dynamic_threshold(data.spec, model, mask, data.defense, cfg.prune_cfg.ca_budget)
        _, rnp_count = prune_threshold(data.spec, model, mask, sel.dt)
        q = rnp_count / data.spec.num_filters
        pruned, count = prune_without_recovering(data.spec, model, ur.params, q)
        after = attack_metrics(data.spec, pruned, data.test_clean, data.asr_test)
        return finish(
            {
                "variant": "prune-wo-recover",
                "metrics_before": metrics_before.to_dict(),
                "metrics_after": after.to_dict(),
                "pruned_count": count,
                "notes": {"q": q, "rnp_pruned_count": rnp_count},
            },
            "ablation_report.json",
        )

    if variant == "learn-incorrect":
        ur = unlearn(data.spec, model, data.defense, cfg.unlearn_cfg)
        tuned = learn_incorrectly(data.spec, model, data.defense, ur.params, cfg.unlearn_cfg)
        mask = recover(data.spec, tuned, data.defense, cfg.recover_cfg)
        sel = select_dynamic_threshold(data.spec, model, mask, data.defense, cfg.prune_cfg.ca_budget)
        pruned, count = prune_threshold(data.spec, model, mask, sel.dt)
        after = attack_metrics(data.spec, pruned, data.test_clean, data.asr_test)
        return finish(
            {
                "variant": "learn-incorrect",
                "metrics_before": metrics_before.to_dict(),
                "metrics_after": after.to_dict(),
                "pruned_count": count,
                "notes": {"threshold": sel.dt},
            },
            "ablation_report.json",
        )

    if variant == "fine-pruning":
        pruned, count = fine_pruning(data.spec, model, data.defense, ca_stop=0.8)
        after = attack_metrics(data.spec, pruned, data.test_clean, data.asr_test)
        return finish(
            {
                "variant": "fine-pruning",
                "metrics_before": metrics_before.to_dict(),
                "metrics_after": after.to_dict(),
                "pruned_count": count,
                "notes": {"ca_stop": 0.8},
            },
            "ablation_report.json",
        )

    raise ConfigError(f"variant: unknown ablation {variant!r}")


def run_aux(config, task: str, out_dir) -> Path:
    """Auxiliary defense tasks on the original vs the unlearned model."""
    from .auxdefense import (
        NCConfig,
        nc_anomaly,
        recover_all_classes,
        save_trigger,
        strip_gap,
    )
    from .ablations import fine_pruning
    from .checkpoint import load_checkpoint
    from .rnp import unlearn
    from .train import attack_metrics

    apply_thread_env()
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, model = prepare(cfg, out)

    unl_ckpt = out / "unlearned.ckpt"
    if (unl_ckpt / "manifest.json").exists():
        unlearned = load_checkpoint(unl_ckpt)
    else:
        unlearned = unlearn(data.spec, model, data.defense, cfg.unlearn_cfg).params
        save_checkpoint(unlearned, unl_ckpt, spec=data.spec)

    aux_raw = cfg.raw.get("aux", {})

    if task == "nc":
        nc_cfg = _build(NCConfig, aux_raw.get("nc", {}), "aux.nc")
        result = {}
        for tag, store in (("original", model), ("unlearned", unlearned)):
            triggers = recover_all_classes(data.spec, store, data.defense, nc_cfg)
            norms = [t.l1_norm for t in triggers]
            indices, flagged = nc_anomaly(norms)
            result[tag] = {
                "l1_norms": norms,
                "anomaly_indices": [float(a) for a in indices],
                "flagged": flagged,
            }
            for trig in triggers:
                save_trigger(trig, out / f"nc_{tag}" / f"class_{trig.target_class}")
        result["target_label"] = cfg.poison.target_label
        (out / "aux_nc.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
        return out

    if task == "strip":
        strip_raw = aux_raw.get("strip", {})
        n_overlays = int(strip_raw.get("n_overlays", 64))
        n_samples = int(strip_raw.get("samples", 100))
        clean = data.test_clean.subset(range(min(n_samples, len(data.test_clean))))
        bad = data.asr_test.subset(range(min(n_samples, len(data.asr_test))))
        result = {
            "n_overlays": n_overlays,
            "samples": len(clean),
            "gap_original": strip_gap(data.spec, model, clean, bad, data.defense, n_overlays),
            "gap_unlearned": strip_gap(data.spec, unlearned, clean, bad, data.defense, n_overlays),
        }
        (out / "aux_strip.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
        return out

    if task == "fp":
        fp_raw = aux_raw.get("fp", {})
        ca_stop = float(fp_raw.get("ca_stop", 0.8))
        result = {}
        for tag, store in (("original", model), ("unlearned", unlearned)):
            pruned, count = fine_pruning(data.spec, store, data.defense, ca_stop=ca_stop)
            metrics = attack_metrics(data.spec, pruned, data.test_clean, data.asr_test)
            result[tag] = {"pruned_count": count, "metrics_after": metrics.to_dict()}
        result["ca_stop"] = ca_stop
        (out / "aux_fp.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
        return out

    raise ConfigError(f"task: unknown aux task {task!r}")


def render_tables(report_paths, out_md=None, out_csv=None) -> str:
    """Summarize reports as a markdown table (+ optional CSV), sorted by
    (attack, defense)."""
    paths = [Path(p) for p in report_paths]
    if not paths:
        raise ValueError("need at least one report")
    reports = []
    for p in paths:
        d = json.loads(p.read_text(encoding="utf-8"))
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{p}: schema_version {d.get('schema_version')!r} not supported")
        reports.append(d)
    reports.sort(key=lambda d: (d.get("attack", ""), d.get("defense", "")))

    rows = [
        {
            "attack": d.get("attack", ""),
            "defense": d.get("defense", ""),
            "asr": f"{d['metrics_after']['asr']:.4f}",
            "ca": f"{d['metrics_after']['ca']:.4f}",
            "pruned": d["pruned_count"],
        }
        for d in reports
    ]
    lines = [
        "| Attack | Defense | ASR | CA | Pruned |",
        "|---|---|---|---|---|",
    ]
    lines += [f"| {r['attack']} | {r['defense']} | {r['asr']} | {r['ca']} | {r['pruned']} |" for r in rows]
    md = "\n".join(lines) + "\n"
    if out_md is not None:
        Path(out_md).write_text(md, encoding="utf-8")
    if out_csv is not None:
        with Path(out_csv).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["attack", "defense", "asr", "ca", "pruned"])
            writer.writeheader()
            writer.writerows(rows)
    return md
