"""Command-line entry points for the lab."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import save_checkpoint, save_dataset
from .harness import (
    ConfigError,
    ExperimentConfig,
    apply_thread_env,
    build_datasets,
    default_config,
    render_tables,
    run,
    run_ablation,
    run_aux,
    sweep,
)
from .train import attack_metrics, train


def _load_config(args) -> ExperimentConfig:
    raw = (
        json.loads(Path(args.config).read_text(encoding="utf-8"))
        if args.config
        else default_config()
    )
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return ExperimentConfig.from_dict(raw)


def _cmd_gen_data(args) -> int:
    apply_thread_env()
    cfg = _load_config(args)
    data = build_datasets(cfg)
    out = Path(args.out)
    save_dataset(data.train_clean, out / "train_clean")
    save_dataset(data.test_clean, out / "test_clean")
    save_dataset(data.poisoned, out / "poisoned")
    save_dataset(data.asr_test, out / "asr_test")
    save_dataset(data.defense, out / "defense")
    print(f"wrote datasets to {out}")
    return 0


def _cmd_train_attack(args) -> int:
    apply_thread_env()
    cfg = _load_config(args)
    data = build_datasets(cfg)
    model, history = train(data.spec, data.poisoned, cfg.train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "backdoored.ckpt", spec=data.spec, seed=cfg.train_cfg.seed)
    metrics = attack_metrics(data.spec, model, data.test_clean, data.asr_test)
    payload = {"ca": metrics.ca, "asr": metrics.asr, "train_history_tail": history[-1]}
    (out / "attack_metrics.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"backdoored model: CA={metrics.ca:.4f} ASR={metrics.asr:.4f} -> {out}")
    return 0


def _cmd_rnp_run(args) -> int:
    cfg = _load_config(args)
    out = run(cfg, args.out)
    report = json.loads((Path(out) / "report.json").read_text(encoding="utf-8"))
    print(
        f"defense done: label={report['backdoor_label']} pruned={report['pruned_count']} "
        f"ASR {report['metrics_before']['asr']:.4f}->{report['metrics_after']['asr']:.4f} "
        f"CA {report['metrics_before']['ca']:.4f}->{report['metrics_after']['ca']:.4f}"
    )
    return 0


def _parse_values(text: str) -> list:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    out = []
    for v in vals:
        try:
            out.append(int(v))
        except ValueError:
            try:
                out.append(float(v))
            except ValueError:
                out.append(v)
    return out


def _cmd_rnp_sweep(args) -> int:
    cfg = _load_config(args)
    csv_path = sweep(cfg, args.axis, _parse_values(args.values), args.out)
    print(f"sweep rows -> {csv_path}")
    return 0


def _cmd_ablate(args) -> int:
    out = run_ablation(_load_config(args), args.variant, args.out)
    print(f"ablation {args.variant} -> {out}")
    return 0


def _cmd_aux(args) -> int:
    out = run_aux(_load_config(args), args.task, args.out)
    print(f"aux {args.task} -> {out}")
    return 0


def _cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    md = render_tables(args.reports, out_dir / "summary.md", out_dir / "summary.csv")
    print(md, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rnplab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_seed=True):
        p.add_argument("--config", type=str, default=None, help="experiment config JSON")
        p.add_argument("--out", type=str, required=True, help="output directory")
        if with_seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate and persist the experiment datasets")
    common(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-attack", help="train the backdoored model and report CA/ASR")
    common(p)
    p.set_defaults(fn=_cmd_train_attack)

    rnp = sub.add_parser("rnp", help="defense pipeline commands")
    rnp_sub = rnp.add_subparsers(dest="rnp_command", required=True)
    p = rnp_sub.add_parser("run", help="full unlearn/recover/prune run")
    common(p)
    p.set_defaults(fn=_cmd_rnp_run)
    p = rnp_sub.add_parser("sweep", help="pipeline sweep over one axis")
    common(p)
    p.add_argument("--axis", type=str, required=True)
    p.add_argument("--values", type=str, required=True, help="comma-separated values")
    p.set_defaults(fn=_cmd_rnp_sweep)

    p = sub.add_parser("ablate", help="run a controlled variant")
    p.add_argument(
        "variant",
        choices=["matrix", "prune-wo-recover", "recover-wo-unlearn", "learn-incorrect", "fine-pruning"],
    )
    common(p)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("aux", help="auxiliary defense tasks")
    p.add_argument("task", choices=["nc", "strip", "fp"])
    common(p)
    p.set_defaults(fn=_cmd_aux)

    p = sub.add_parser("report", help="summarize report.json files as tables")
    p.add_argument("reports", nargs="+", help="paths to report.json files")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
