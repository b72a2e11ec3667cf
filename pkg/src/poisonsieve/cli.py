"""Command-line pipeline stages.

Stages (as a positional command or via --stage): pretrain, craft, filter,
finetune, evaluate, sweep, report. Each stage reads and writes files under
--out, so the pipeline can run end to end or one stage at a time. Exit codes:
0 on success, 1 on configuration errors, 2 when a sweep finished with failed
cells.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import rng
from .attacks import attack_success
from .datasets import Dataset, export_dataset, import_dataset
from .defense import FilterReport, filter_dataset, spectral_filter_baseline
from .errors import ConfigError, PoisonSieveError
from .experiment import (
    ExperimentConfig,
    craft_poisons,
    emit_report,
    load_report,
    prepare_environment,
    run_experiment,
)
from .layers import build_head, load_extractor, load_head, save_extractor, save_head
from .serialize import read_tensor, write_tensor
from .training import evaluate_accuracy, transfer_finetune

STAGES = ("pretrain", "craft", "filter", "finetune", "evaluate", "sweep", "report")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonsieve",
                                     description="clean-label poisoning laboratory")
    parser.add_argument("command", nargs="?", choices=STAGES, help="pipeline stage to run")
    parser.add_argument("--stage", choices=STAGES, help="alternative way to pick the stage")
    parser.add_argument("--config", type=Path, help="experiment config file (ini-style)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", type=Path, default=Path("runs/out"), help="working directory")
    parser.add_argument("--jobs", type=int, help="worker processes for sweep cells")
    parser.add_argument("--attack", help="restrict craft stage to one attack")
    parser.add_argument("--target", type=int, help="restrict craft stage to one target index")
    parser.add_argument("--defense", default="sieve", help="defense for the filter stage")
    parser.add_argument("--poisons", type=Path, help="poison-set directory to apply")
    parser.add_argument("--filter-report", type=Path, help="filter report JSON to apply")
    parser.add_argument("--format", dest="formats", default="json,csv,markdown",
                        help="report formats to emit (comma separated)")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.default()
    if args.seed is not None:
        cfg.set("run", "master_seed", args.seed)
    if args.jobs is not None:
        cfg.set("run", "jobs", args.jobs)
    cfg.validate()
    return cfg


def _data_dir(out: Path, name: str) -> Path:
    return out / "data" / name


def _load_environment(cfg: ExperimentConfig, out: Path):
    model = load_extractor(out / "extractor")
    env = prepare_environment(cfg, model=model)
    return env


def stage_pretrain(args) -> int:
    cfg = _load_config(args)
    env = prepare_environment(cfg)
    out = args.out
    save_extractor(env.model, out / "extractor")
    export_dataset(env.finetune_set, _data_dir(out, "finetune"))
    export_dataset(env.test_set, _data_dir(out, "test"))
    targets = Dataset(points=list(env.target_points), classes=env.finetune_set.classes)
    export_dataset(targets, _data_dir(out, "targets"))
    print(f"pretrained extractor saved to {out / 'extractor'}; "
          f"clean accuracy {env.clean_accuracy:.4f}")
    return 0


def _poison_dir_name(attack: str, epsilon: float, budget: float, target_index: int) -> str:
    return f"{attack}_e{round(epsilon * 255)}_b{round(budget * 100)}_t{target_index}"


def stage_craft(args) -> int:
    cfg = _load_config(args)
    env = _load_environment(cfg, args.out)
    attacks = [args.attack] if args.attack else cfg.attacks
    target_indices = [args.target] if args.target is not None else range(
        int(cfg.get("targets", "count")))
    for attack in attacks:
        for epsilon in cfg.epsilons:
            for budget in cfg.budgets:
                for t in target_indices:
                    task, poisons, slots = craft_poisons(env, attack, epsilon, budget, t)
                    directory = args.out / "poisons" / _poison_dir_name(attack, epsilon, budget, t)
                    directory.mkdir(parents=True, exist_ok=True)
                    lines = []
                    for pid, image in poisons.entries:
                        fname = f"img{pid:06d}.psv"
                        write_tensor(directory / fname, image)
                        lines.append(f"{pid} {fname}")
                    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
                    with open(directory / "loss.csv", "w", newline="") as fh:
                        writer = csv.writer(fh)
                        writer.writerow(["iteration", "objective"])
                        writer.writerows(enumerate(poisons.loss_trace))
                    print(f"crafted {directory.name}: {len(slots)} poisons, "
                          f"objective {poisons.loss_trace[0]:.4f} -> {poisons.loss_trace[-1]:.4f}")
    return 0


def _load_poisoned_dataset(cfg: ExperimentConfig, out: Path, poisons: Path | None) -> Dataset:
    data = import_dataset(_data_dir(out, "finetune"))
    if poisons is None:
        return data
    mapping = {}
    for line in (poisons / "manifest.txt").read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        pid, fname = line.split()
        mapping[int(pid)] = read_tensor(poisons / fname)
    return data.with_poisons(mapping)


def stage_filter(args) -> int:
    cfg = _load_config(args)
    model = load_extractor(args.out / "extractor")
    data = _load_poisoned_dataset(cfg, args.out, args.poisons)
    if args.defense == "sieve":
        report = filter_dataset(model, data.view(), cfg.distance_config(),
                                tap=cfg.get("defense", "bn_tap"))
    elif args.defense == "spectral":
        report = spectral_filter_baseline(
            model, data.view(), float(cfg.get("defense", "spectral_removal_fraction")))
    else:
        raise ConfigError(f"filter stage supports sieve or spectral, got {args.defense!r}")
    path = args.out / f"filter_{args.defense}.json"
    path.write_text(report.to_json() + "\n")
    print(f"kept {len(report.kept_ids)}, removed {len(report.removed_ids)}; report at {path}")
    return 0


def stage_finetune(args) -> int:
    cfg = _load_config(args)
    model = load_extractor(args.out / "extractor")
    data = _load_poisoned_dataset(cfg, args.out, args.poisons)
    if args.filter_report is not None:
        report = FilterReport.from_json(args.filter_report.read_text())
        data = data.subset(report.kept_ids)
    head = build_head(data.classes, seed=rng.derive_key(cfg.master_seed, "head-init"))
    transfer_finetune(model, head, data,
                      cfg.train_config("finetune", seed=rng.derive_key(cfg.master_seed, "finetune")))
    save_head(head, args.out / "head")
    test = import_dataset(_data_dir(args.out, "test"))
    print(f"fine-tuned on {len(data)} points; test accuracy "
          f"{evaluate_accuracy(model, head, test):.4f}; head saved to {args.out / 'head'}")
    return 0


def stage_evaluate(args) -> int:
    cfg = _load_config(args)
    model = load_extractor(args.out / "extractor")
    head = load_head(args.out / "head")
    test = import_dataset(_data_dir(args.out, "test"))
    result = {"test_accuracy": evaluate_accuracy(model, head, test)}
    targets_dir = _data_dir(args.out, "targets")
    if targets_dir.exists():
        targets = import_dataset(targets_dir)
        base_class = int(cfg.get("targets", "base_class"))
        verdicts = []
        for point in targets.points:
            from .datasets import PoisonTask

            task = PoisonTask(target_image=point.image, target_label=point.label,
                              base_class=base_class, poison_budget=1,
                              epsilon=float(cfg.epsilons[0]), target_id=point.id)
            verdicts.append(int(attack_success(model, head, task)))
        result["attack_success"] = verdicts
        result["attack_success_rate"] = float(np.mean(verdicts))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def stage_sweep(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg, out_dir=args.out)
    args.out.mkdir(parents=True, exist_ok=True)
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    suffix = {"json": "json", "csv": "csv", "markdown": "md"}
    for fmt in formats:
        if fmt not in suffix:
            raise ConfigError(f"unknown report format {fmt!r}")
        emit_report(report, fmt, args.out / f"report.{suffix[fmt]}")
    failed = [c for c in report.cells if c.status != "ok"]
    print(f"sweep complete: {len(report.cells)} cells, {len(failed)} failed; "
          f"reports in {args.out}")
    for cell in failed:
        print(f"  FAILED {cell.key()}: {cell.error}")
    return 2 if failed else 0


def stage_report(args) -> int:
    report = load_report(args.out / "report.json")
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    suffix = {"json": "json", "csv": "csv", "markdown": "md"}
    for fmt in formats:
        if fmt not in suffix:
            raise ConfigError(f"unknown report format {fmt!r}")
        emit_report(report, fmt, args.out / f"report.{suffix[fmt]}")
    print(f"report re-emitted to {args.out}")
    return 0


_HANDLERS = {
    "pretrain": stage_pretrain,
    "craft": stage_craft,
    "filter": stage_filter,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
    "sweep": stage_sweep,
    "report": stage_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    stage = args.command or args.stage
    if stage is None:
        parser.print_usage(sys.stderr)
        print("error: no stage given (positional or --stage)", file=sys.stderr)
        return 1
    try:
        return _HANDLERS[stage](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PoisonSieveError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
