"""Config-driven experiment orchestration.

A sweep runs the full pipeline per grid cell: synthesize data, pretrain the
extractor once, fine-tune a clean head once (its accuracy is shared by every
cell), then for each (attack, epsilon, budget, target): craft poisons,
verify the undefended outcome (which defines whether the poison set is
"real"), apply each defense, fine-tune on the surviving points, and record
outcomes. Defended success rates are reported over targets whose undefended
attack succeeded; those targets' counts are carried separately.

Everything is keyed off one master seed; report.json is byte-reproducible.
Wall-clock timings go to a sidecar file so reports stay comparable.
"""

from __future__ import annotations

import configparser
import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .attacks import CraftConfig, attack_success, craft_bp, craft_fc, craft_gm
from .datasets import Dataset, PoisonTask, select_poison_slots, synth_dataset
from .defense import (
    DistanceConfig,
    FilterReport,
    HISTOGRAM_COLUMNS,
    export_distance_histogram,
    filter_dataset,
    spectral_filter_baseline,
)
from .errors import ConfigError, PoisonSieveError
from .layers import DownstreamHead, FeatureExtractor, build_extractor, build_head
from .training import TrainConfig, evaluate_accuracy, pretrain_extractor, transfer_finetune

ATTACKS = ("fc", "bp", "gm")
DEFENSES = ("none", "sieve", "spectral")

_DEFAULTS: dict[str, dict[str, str]] = {
    "dataset": {
        "classes": "10",
        "per_class": "50",
        "side": "16",
        "noise_sigma": "0.05",
        "pretrain_per_class": "200",
        "test_per_class": "20",
    },
    "model": {"arch": "TinyConvBN-4"},
    "pretrain": {
        "optimizer": "sgd",
        "learning_rate": "0.01",
        "momentum": "0.9",
        "epochs": "10",
        "batch_size": "64",
        "weight_decay": "0",
    },
    "finetune": {
        "optimizer": "adam",
        "learning_rate": "0.1",
        "epochs": "60",
        "batch_size": "64",
        "weight_decay": "0",
    },
    "attack": {
        "attacks": "fc,bp,gm",
        "iterations": "300",
        "step_size": "auto",
        "fc_beta": "0.05",
        "restarts": "1",
        "backtrack": "true",
        "bp_taps": "final",
        "gm_theta": "head",
        "fd_h": "1e-4",
    },
    "defense": {
        "defenses": "none,sieve,spectral",
        "beta": "0.5",
        "gamma": "uniform",
        "bn_tap": "input",
        "spectral_removal_fraction": "0.2",
    },
    "targets": {"count": "20", "target_class": "6", "base_class": "8"},
    "sweep": {"epsilons": "10/255,30/255", "budgets": "0.14"},
    "run": {"master_seed": "7", "jobs": "1"},
}


def _parse_fraction(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        return float(num) / float(den)
    return float(text)


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("true", "yes", "1", "on"):
        return True
    if value in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


@dataclass
class ExperimentConfig:
    """Flat view of the sectioned key-value config; every key has a default."""
    raw: dict[str, dict[str, str]]

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls(raw={s: dict(kv) for s, kv in _DEFAULTS.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.default()
        for section in parser.sections():
            if section not in cfg.raw:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in cfg.raw[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                cfg.raw[section][key] = value
        cfg.validate()
        return cfg

    def get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in self.raw or key not in self.raw[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.raw[section][key] = str(value)

    # typed accessors
    @property
    def master_seed(self) -> int:
        return int(self.get("run", "master_seed"))

    @property
    def jobs(self) -> int:
        return int(self.get("run", "jobs"))

    @property
    def attacks(self) -> list[str]:
        return [a.strip() for a in self.get("attack", "attacks").split(",") if a.strip()]

    @property
    def defenses(self) -> list[str]:
        return [d.strip() for d in self.get("defense", "defenses").split(",") if d.strip()]

    @property
    def epsilons(self) -> list[float]:
        return [_parse_fraction(e) for e in self.get("sweep", "epsilons").split(",") if e.strip()]

    @property
    def budgets(self) -> list[float]:
        return [float(b) for b in self.get("sweep", "budgets").split(",") if b.strip()]

    def train_config(self, section: str, seed: int) -> TrainConfig:
        return TrainConfig(
            optimizer=self.get(section, "optimizer"),
            learning_rate=float(self.get(section, "learning_rate")),
            epochs=int(self.get(section, "epochs")),
            batch_size=int(self.get(section, "batch_size")),
            weight_decay=float(self.get(section, "weight_decay")),
            momentum=float(self.raw[section].get("momentum", "0.9")),
            seed=seed,
        )

    def craft_config(self, epsilon: float, seed: int) -> CraftConfig:
        step = self.get("attack", "step_size")
        return CraftConfig(
            epsilon=epsilon,
            iterations=int(self.get("attack", "iterations")),
            step_size=None if step == "auto" else float(step),
            fc_beta=float(self.get("attack", "fc_beta")),
            restarts=int(self.get("attack", "restarts")),
            backtrack=_parse_bool(self.get("attack", "backtrack")),
            bp_taps=self.get("attack", "bp_taps"),
            gm_theta=self.get("attack", "gm_theta"),
            fd_h=float(self.get("attack", "fd_h")),
            seed=seed,
        )

    def distance_config(self) -> DistanceConfig:
        gamma_text = self.get("defense", "gamma")
        gamma = None if gamma_text == "uniform" else [float(g) for g in gamma_text.split(",")]
        return DistanceConfig(gamma=gamma, beta=float(self.get("defense", "beta")))

    def validate(self) -> None:
        for attack in self.attacks:
            if attack not in ATTACKS:
                raise ConfigError(f"unknown attack {attack!r}")
        for defense in self.defenses:
            if defense not in DEFENSES:
                raise ConfigError(f"unknown defense {defense!r}")
        if not self.attacks or not self.defenses:
            raise ConfigError("attacks and defenses must be nonempty")
        if not self.epsilons or not self.budgets:
            raise ConfigError("sweep lists must be nonempty")
        if int(self.get("targets", "count")) < 1:
            raise ConfigError("need at least one target")
        if int(self.get("targets", "target_class")) == int(self.get("targets", "base_class")):
            raise ConfigError("target class must differ from base class")

    def flat(self) -> dict[str, str]:
        return {f"{section}.{key}": value
                for section, kv in sorted(self.raw.items())
                for key, value in sorted(kv.items())}


@dataclass
class CellResult:
    attack: str
    defense: str
    epsilon: float
    budget: float
    n_targets: int = 0
    n_real: int = 0
    undefended_success_rate: float = 0.0
    attack_success_rate: float = 0.0
    test_accuracy: float = 0.0
    clean_accuracy: float = 0.0
    poisons_removed_fraction: float = 0.0  # pooled over real poison sets
    failed_poisons_removed_fraction: float = 0.0  # pooled over failed sets
    clean_removed_fraction: float = 0.0
    per_target_success: list[int] = field(default_factory=list)
    status: str = "ok"
    error: str = ""
    wall_time: float = 0.0  # excluded from report.json (sidecar)

    def key(self) -> tuple:
        return (self.attack, self.defense, self.epsilon, self.budget)


@dataclass
class ExperimentReport:
    master_seed: int
    config: dict[str, str]
    clean_accuracy: float
    cells: list[CellResult]

    def cell(self, attack: str, defense: str, epsilon: float, budget: float) -> CellResult:
        for c in self.cells:
            if c.key() == (attack, defense, epsilon, budget):
                return c
        raise KeyError((attack, defense, epsilon, budget))

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "config": self.config,
            "clean_accuracy": self.clean_accuracy,
            "cells": [
                {
                    "attack": c.attack,
                    "defense": c.defense,
                    "epsilon": c.epsilon,
                    "budget": c.budget,
                    "n_targets": c.n_targets,
                    "n_real": c.n_real,
                    "undefended_success_rate": c.undefended_success_rate,
                    "attack_success_rate": c.attack_success_rate,
                    "test_accuracy": c.test_accuracy,
                    "clean_accuracy": c.clean_accuracy,
                    "poisons_removed_fraction": c.poisons_removed_fraction,
                    "failed_poisons_removed_fraction": c.failed_poisons_removed_fraction,
                    "clean_removed_fraction": c.clean_removed_fraction,
                    "per_target_success": c.per_target_success,
                    "status": c.status,
                    "error": c.error,
                }
                for c in sorted(self.cells, key=lambda c: c.key())
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentReport":
        cells = [CellResult(**{k: v for k, v in c.items()}) for c in payload["cells"]]
        return cls(master_seed=payload["master_seed"], config=payload["config"],
                   clean_accuracy=payload["clean_accuracy"], cells=cells)


@dataclass
class Environment:
    """Shared per-seed state: data splits, pretrained extractor, heads."""
    cfg: ExperimentConfig
    pretrain_set: Dataset
    finetune_set: Dataset
    test_set: Dataset
    target_points: list
    model: FeatureExtractor
    clean_head: DownstreamHead
    proxy_head: DownstreamHead
    clean_accuracy: float
    head_seed: int
    finetune_seed: int


def prepare_environment(cfg: ExperimentConfig, model: FeatureExtractor | None = None) -> Environment:
    """Build datasets and the pretrained, frozen extractor for one master seed.

    Pass a pretrained model to skip the pretraining stage (CLI handoff).
    """
    seed = cfg.master_seed
    classes = int(cfg.get("dataset", "classes"))
    side = int(cfg.get("dataset", "side"))
    sigma = float(cfg.get("dataset", "noise_sigma"))
    per_class = int(cfg.get("dataset", "per_class"))
    target_class = int(cfg.get("targets", "target_class"))
    n_targets = int(cfg.get("targets", "count"))

    pretrain_set = synth_dataset(classes, int(cfg.get("dataset", "pretrain_per_class")), side,
                                 seed=seed, noise_sigma=sigma, tag="pretrain")
    finetune_set = synth_dataset(classes, per_class, side, seed=seed, noise_sigma=sigma,
                                 tag="finetune", id_start=100000)
    test_set = synth_dataset(classes, int(cfg.get("dataset", "test_per_class")), side,
                             seed=seed, noise_sigma=sigma, tag="test", id_start=900000)
    target_pool = synth_dataset(classes, n_targets, side, seed=seed, noise_sigma=sigma,
                                tag="targets", id_start=500000)
    target_points = [p for p in target_pool.points if p.label == target_class][:n_targets]

    if model is None:
        model = build_extractor(cfg.get("model", "arch"),
                                seed=rng.derive_key(seed, "extractor"), side=side)
        pretrain_cfg = cfg.train_config("pretrain", seed=rng.derive_key(seed, "pretrain"))
        pretrain_extractor(model, pretrain_set, pretrain_cfg)
    model.freeze()

    head_seed = rng.derive_key(seed, "head-init")
    finetune_seed = rng.derive_key(seed, "finetune")
    clean_head = build_head(classes, seed=head_seed)
    transfer_finetune(model, clean_head, finetune_set,
                      cfg.train_config("finetune", seed=finetune_seed))
    clean_accuracy = evaluate_accuracy(model, clean_head, test_set)
    # The attacker knows the victim's initialization and training recipe, so
    # the gradient-matching proxy is the victim's head at initialization,
    # where per-sample gradients are still informative.
    proxy_head = build_head(classes, seed=head_seed)
    return Environment(cfg=cfg, pretrain_set=pretrain_set, finetune_set=finetune_set,
                       test_set=test_set, target_points=target_points, model=model,
                       clean_head=clean_head, proxy_head=proxy_head,
                       clean_accuracy=clean_accuracy, head_seed=head_seed,
                       finetune_seed=finetune_seed)


def craft_poisons(env: Environment, attack: str, epsilon: float, budget: float,
                  target_index: int):
    """Craft one poison set; returns (task, PoisonSet, slot ids)."""
    cfg = env.cfg
    base_class = int(cfg.get("targets", "base_class"))
    target = env.target_points[target_index]
    task = PoisonTask(target_image=target.image, target_label=target.label,
                      base_class=base_class, poison_budget=budget, epsilon=epsilon,
                      target_id=target.id)
    slot_seed = rng.derive_key(cfg.master_seed, "slots", target_index)
    slots = select_poison_slots(env.finetune_set, task, seed=slot_seed)
    if not slots:  # degenerate budget: nothing to perturb
        from .attacks import PoisonSet

        return task, PoisonSet(entries=[], loss_trace=[0.0]), slots
    bases = np.stack([env.finetune_set.by_id(i).image for i in slots])
    craft_seed = rng.derive_key(cfg.master_seed, "craft", attack, target_index,
                                round(epsilon * 255000), round(budget * 10000))
    craft_cfg = cfg.craft_config(epsilon, seed=craft_seed)
    if attack == "fc":
        poisons = craft_fc(env.model, bases, target.image, craft_cfg, base_ids=slots)
    elif attack == "bp":
        poisons = craft_bp(env.model, bases, target.image, craft_cfg, base_ids=slots)
    elif attack == "gm":
        labels = np.full(len(slots), base_class)
        poisons = craft_gm(env.model, env.proxy_head, bases, labels, target.image,
                           craft_cfg, base_ids=slots)
    else:
        raise ConfigError(f"unknown attack {attack!r}")
    return task, poisons, slots


def _finetune_fresh_head(env: Environment, data: Dataset) -> DownstreamHead:
    head = build_head(data.classes, seed=env.head_seed)
    return transfer_finetune(env.model, head, data,
                             env.cfg.train_config("finetune", seed=env.finetune_seed))


def run_target_job(env: Environment, attack: str, epsilon: float, budget: float,
                   target_index: int, defenses: list[str]) -> dict:
    """Craft once, evaluate under every defense; returns one job record."""
    task, poisons, slots = craft_poisons(env, attack, epsilon, budget, target_index)
    poisoned = env.finetune_set.with_poisons(poisons.as_mapping())
    provenance = poisoned.provenance_map()
    n_poisons = len(slots)
    n_clean = len(poisoned) - n_poisons

    undefended_head = _finetune_fresh_head(env, poisoned)
    real = attack_success(env.model, undefended_head, task)
    record = {
        "target_index": target_index,
        "real": int(real),
        "n_poisons": n_poisons,
        "defenses": {},
        "histogram_rows": [],
    }
    undefended_acc = evaluate_accuracy(env.model, undefended_head, env.test_set)
    record["defenses"]["none"] = {
        "success": int(real),
        "test_accuracy": undefended_acc,
        "poisons_removed": 0,
        "clean_removed": 0,
        "n_clean": n_clean,
    }
    for defense in defenses:
        if defense == "none":
            continue
        if defense == "sieve":
            report = filter_dataset(env.model, poisoned.view(), env.cfg.distance_config(),
                                    tap=env.cfg.get("defense", "bn_tap"))
            realness = "real" if real else "failed"
            record["histogram_rows"] = export_distance_histogram(
                report, task.base_class, task.target_label, provenance, realness)
        elif defense == "spectral":
            report = spectral_filter_baseline(
                env.model, poisoned.view(),
                float(env.cfg.get("defense", "spectral_removal_fraction")))
        else:
            raise ConfigError(f"unknown defense {defense!r}")
        kept = poisoned.subset(report.kept_ids)
        defended_head = _finetune_fresh_head(env, kept)
        record["defenses"][defense] = {
            "success": int(attack_success(env.model, defended_head, task)),
            "test_accuracy": evaluate_accuracy(env.model, defended_head, env.test_set),
            "poisons_removed": sum(1 for i in report.removed_ids if provenance[i] == "poisoned"),
            "clean_removed": sum(1 for i in report.removed_ids if provenance[i] == "clean"),
            "n_clean": n_clean,
        }
    return record


_WORKER_ENV: Environment | None = None


def _pool_job(args) -> tuple:
    attack, epsilon, budget, target_index, defenses = args
    record = run_target_job(_WORKER_ENV, attack, epsilon, budget, target_index, defenses)
    return (attack, epsilon, budget, target_index), record


def _aggregate_cells(cfg: ExperimentConfig, clean_accuracy: float,
                     records: dict, failures: dict) -> list[CellResult]:
    cells = []
    n_targets = int(cfg.get("targets", "count"))
    for attack in cfg.attacks:
        for epsilon in cfg.epsilons:
            for budget in cfg.budgets:
                point_records = [records.get((attack, epsilon, budget, t))
                                 for t in range(n_targets)]
                error = failures.get((attack, epsilon, budget))
                for defense in cfg.defenses:
                    cell = CellResult(attack=attack, defense=defense, epsilon=epsilon,
                                      budget=budget, clean_accuracy=clean_accuracy,
                                      n_targets=n_targets)
                    if error is not None:
                        cell.status = "failed"
                        cell.error = error
                        cells.append(cell)
                        continue
                    real_flags = [r["real"] for r in point_records]
                    cell.n_real = int(sum(real_flags))
                    cell.undefended_success_rate = float(np.mean(real_flags))
                    stats = [r["defenses"][defense] for r in point_records]
                    cell.per_target_success = [s["success"] for s in stats]
                    cell.test_accuracy = float(np.mean([s["test_accuracy"] for s in stats]))
                    if defense == "none":
                        cell.attack_success_rate = cell.undefended_success_rate
                    else:
                        real_successes = [s["success"] for s, r in zip(stats, point_records)
                                          if r["real"]]
                        cell.attack_success_rate = (
                            float(np.mean(real_successes)) if real_successes else 0.0)
                        removed = sum(s["poisons_removed"] for s, r in zip(stats, point_records)
                                      if r["real"])
                        total = sum(r["n_poisons"] for r in point_records if r["real"])
                        cell.poisons_removed_fraction = removed / total if total else 0.0
                        removed_f = sum(s["poisons_removed"] for s, r in zip(stats, point_records)
                                        if not r["real"])
                        total_f = sum(r["n_poisons"] for r in point_records if not r["real"])
                        cell.failed_poisons_removed_fraction = (
                            removed_f / total_f if total_f else 0.0)
                        clean_removed = sum(s["clean_removed"] for s in stats)
                        clean_total = sum(s["n_clean"] for s in stats)
                        cell.clean_removed_fraction = (
                            clean_removed / clean_total if clean_total else 0.0)
                    cells.append(cell)
    return cells


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   jobs: int | None = None,
                   model: FeatureExtractor | None = None) -> ExperimentReport:
    """The full sweep. Writes histogram CSVs and a timing sidecar under out_dir."""
    global _WORKER_ENV
    cfg.validate()
    jobs = cfg.jobs if jobs is None else jobs
    t_start = time.monotonic()
    env = prepare_environment(cfg, model=model)
    n_targets = int(cfg.get("targets", "count"))
    if len(env.target_points) < n_targets:
        raise ConfigError(f"only {len(env.target_points)} targets available, need {n_targets}")

    job_args = [(attack, epsilon, budget, t, cfg.defenses)
                for attack in cfg.attacks
                for epsilon in cfg.epsilons
                for budget in cfg.budgets
                for t in range(n_targets)]
    records: dict = {}
    failures: dict = {}
    timings: list[tuple] = []
    if jobs > 1:
        _WORKER_ENV = env
        try:
            import multiprocessing as mp

            with ProcessPoolExecutor(max_workers=jobs,
                                     mp_context=mp.get_context("fork")) as pool:
                for args, outcome in zip(job_args, pool.map(_try_pool_job, job_args)):
                    key = args[:4]
                    record, error, elapsed = outcome
                    timings.append((key, elapsed))
                    if error is not None:
                        failures[key[:3]] = error
                    else:
                        records[key] = record
        finally:
            _WORKER_ENV = None
    else:
        for args in job_args:
            key = args[:4]
            t0 = time.monotonic()
            try:
                records[key] = run_target_job(env, *args)
            except PoisonSieveError as exc:
                failures[key[:3]] = f"{type(exc).__name__}: {exc}"
            timings.append((key, time.monotonic() - t0))

    cells = _aggregate_cells(cfg, env.clean_accuracy, records, failures)
    report = ExperimentReport(master_seed=cfg.master_seed, config=cfg.flat(),
                              clean_accuracy=env.clean_accuracy, cells=cells)
    total_time = time.monotonic() - t_start
    for cell in report.cells:
        cell.wall_time = sum(t for (key, t) in timings
                             if key[0] == cell.attack and key[1] == cell.epsilon
                             and key[2] == cell.budget)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_histograms(cfg, records, out_dir)
        with open(out_dir / "timings.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attack", "epsilon", "budget", "target_index", "seconds"])
            for (attack, epsilon, budget, t), elapsed in timings:
                writer.writerow([attack, epsilon, budget, t, f"{elapsed:.3f}"])
            writer.writerow(["total", "", "", "", f"{total_time:.3f}"])
    return report


def _try_pool_job(args):
    t0 = time.monotonic()
    try:
        _, record = _pool_job(args)
        return record, None, time.monotonic() - t0
    except PoisonSieveError as exc:
        return None, f"{type(exc).__name__}: {exc}", time.monotonic() - t0


def histogram_filename(attack: str, epsilon: float, budget: float) -> str:
    return f"hist_{attack}_e{round(epsilon * 255)}_b{round(budget * 100)}.csv"


def _write_histograms(cfg: ExperimentConfig, records: dict, out_dir: Path) -> None:
    if "sieve" not in cfg.defenses:
        return
    for attack in cfg.attacks:
        for epsilon in cfg.epsilons:
            for budget in cfg.budgets:
                rows = []
                for t in range(int(cfg.get("targets", "count"))):
                    record = records.get((attack, epsilon, budget, t))
                    if record is not None:
                        rows.extend(record["histogram_rows"])
                if not rows:
                    continue
                path = out_dir / histogram_filename(attack, epsilon, budget)
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(HISTOGRAM_COLUMNS)
                    writer.writerows(rows)


def emit_report(report: ExperimentReport, fmt: str, path: str | Path) -> None:
    """Serialize the report deterministically as json, csv, or a markdown table."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        fields = ["attack", "defense", "epsilon", "budget", "n_targets", "n_real",
                  "undefended_success_rate", "attack_success_rate", "test_accuracy",
                  "clean_accuracy", "poisons_removed_fraction",
                  "failed_poisons_removed_fraction", "clean_removed_fraction", "status"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for c in sorted(report.cells, key=lambda c: c.key()):
                writer.writerow([getattr(c, f) for f in fields])
    elif fmt == "markdown":
        lines = ["| attack | defense | epsilon | budget | attack succ. | test acc. | clean acc. |",
                 "|---|---|---|---|---|---|---|"]
        for c in sorted(report.cells, key=lambda c: c.key()):
            lines.append(
                f"| {c.attack} | {c.defense} | {c.epsilon:.4f} | {c.budget} "
                f"| {c.attack_success_rate:.2%} | {c.test_accuracy:.2%} "
                f"| {c.clean_accuracy:.2%} |")
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")


def load_report(path: str | Path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))
