"""Experiment configs and run directories.

A config is a JSON object with nested sections. Every key is checked
against the dataclass it feeds, so a typo fails loudly with the dotted key
name. A run directory holds:

    config.json       fully resolved config, seeds, dataset hash
    metrics.jsonl     one record per (seed, task, epoch), then one test record per seed
    summary.json      per-task and averaged accuracy per seed
    checkpoints/      one ``.npz`` per seed (and per task for separate runs)
    routing/          per-example routing weights as CSV
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .backbone import BackboneConfig
from .calibration import DEFAULT_REJECTION_RATES
from .checkpoint import save_checkpoint
from .errors import ConfigurationError
from .routing import write_routing_csv
from .synthdata import MultiTaskDataset, SynthConfig, generate, load_dataset, save_dataset
from .training import RunResult, SeedRun, TrainConfig, frozen_digest, build_model

OUTPUT_ROOT_ENV = "MODELAB_OUTPUT_ROOT"

ADAPTER_KEYS = ("rank", "alpha", "magnitude")
ROUTING_KEYS = ("n_experts", "temperature", "lambda_lb", "lb_kind", "stop_gradient",
                "router_init_scale")
TRAINING_KEYS = ("regime", "epochs", "batch_size", "lr", "warmup_steps", "weight_decay",
                 "seeds", "stage1_epochs", "eval_batch_size")


@dataclass
class EvalConfig:
    n_bins: int = 10
    rejection_rates: tuple[float, ...] = DEFAULT_REJECTION_RATES

    def __post_init__(self):
        self.rejection_rates = tuple(float(r) for r in self.rejection_rates)
        if self.n_bins < 1:
            raise ConfigurationError("eval.n_bins must be at least 1")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    dataset_dir: str | None = None
    synthdata: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir)

    def data_path(self) -> Path:
        if self.dataset_dir:
            return Path(self.dataset_dir)
        return self.output_root() / "data" / self.synthdata.digest()[:12]

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset_dir": self.dataset_dir,
            "synthdata": self.synthdata.to_dict(),
            "backbone": asdict(self.backbone),
            "adapters": {k: t[k] for k in ADAPTER_KEYS},
            "routing": {k: t[k] for k in ROUTING_KEYS},
            "training": {k: t[k] for k in TRAINING_KEYS},
            "eval": {"n_bins": self.eval.n_bins, "rejection_rates": list(self.eval.rejection_rates)},
        }


_SECTIONS = ("synthdata", "backbone", "adapters", "routing", "training", "eval")
_TOP = ("seed", "output_dir", "dataset_dir")


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigurationError(f"config section {section!r} must be an object", key=section)
    for k in given:
        if k not in allowed:
            raise ConfigurationError(f"unknown config key {section}.{k}", key=f"{section}.{k}")


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    """Build a config from a parsed JSON object; the master seed fills unset seeds."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    for k in raw:
        if k not in _TOP + _SECTIONS:
            raise ConfigurationError(f"unknown config key {k}", key=k)
    seed = int(raw.get("seed", 0))
    sections = {s: raw.get(s, {}) for s in _SECTIONS}
    _check_keys("synthdata", sections["synthdata"], [f.name for f in fields(SynthConfig)])
    _check_keys("backbone", sections["backbone"], [f.name for f in fields(BackboneConfig)])
    _check_keys("adapters", sections["adapters"], ADAPTER_KEYS)
    _check_keys("routing", sections["routing"], ROUTING_KEYS)
    _check_keys("training", sections["training"], TRAINING_KEYS)
    _check_keys("eval", sections["eval"], [f.name for f in fields(EvalConfig)])

    def build(section: str, cls, values: dict):
        try:
            return cls(**values)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{section}: {exc}", key=section) from None
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{section}: {exc}", key=section) from None

    synth = build("synthdata", SynthConfig, {"seed": seed, **sections["synthdata"]})
    back = build("backbone", BackboneConfig, {"seed": seed, **sections["backbone"]})
    back = replace(back, d_in=synth.d_in, n_tasks=synth.n_tasks,
                   max_seq_len=max(back.max_seq_len, synth.seq_len))
    train_kw = {"seeds": [seed, seed + 1, seed + 2], **sections["adapters"],
                **sections["routing"], **sections["training"]}
    train = build("training", TrainConfig, train_kw)
    ev = build("eval", EvalConfig, sections["eval"])
    return ExperimentConfig(seed, str(raw.get("output_dir", "runs")), raw.get("dataset_dir"),
                            synth, back, train, ev)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config({})
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)


# datasets

def ensure_dataset(cfg: ExperimentConfig, create: bool = False) -> tuple[MultiTaskDataset, Path]:
    path = cfg.data_path()
    if create:
        if (path / "manifest.json").exists():
            ds = load_dataset(path)
        else:
            ds = generate(cfg.synthdata)
            save_dataset(ds, path)
        return ds, path
    ds = load_dataset(path)
    if ds.config != cfg.synthdata:
        raise ConfigurationError(f"dataset at {path} was generated from a different synthdata config")
    return ds, path


# run directories

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


class RunDir:
    """Append-only writer for one run's artifacts; every written path is reported."""

    def __init__(self, path: str | Path, announce: Callable[[str, Path], None] | None = None):
        self.path = Path(path)
        self.announce = announce or (lambda kind, p: None)

    def _out(self, kind: str, p: Path) -> Path:
        self.announce(kind, p)
        return p

    def create(self, cfg: ExperimentConfig, dataset_hash: str, regime: str) -> None:
        if (self.path / "metrics.jsonl").exists():
            raise ConfigurationError(f"run directory {self.path} already holds a run")
        self.path.mkdir(parents=True, exist_ok=True)
        snap = cfg.to_dict()
        snap["training"]["regime"] = regime
        snap["dataset_hash"] = dataset_hash
        snap["config_hash"] = cfg.synthdata.digest()
        p = self.path / "config.json"
        p.write_text(json.dumps(snap, indent=2, sort_keys=True))
        self._out("config", p)

    def log(self, record: dict) -> None:
        p = self.path / "metrics.jsonl"
        with p.open("a") as fh:
            fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")

    def log_history(self, run: SeedRun, task: int | None = None) -> None:
        for epoch, acc in enumerate(run.dev_accuracy):
            rec = {"kind": "epoch", "seed": run.seed, "epoch": epoch,
                   "train_loss": run.train_loss[epoch], "dev_accuracy": acc}
            if task is not None:
                rec["task"] = task
            if run.routing_entropy:
                rec["routing_entropy"] = run.routing_entropy[epoch]
            self.log(rec)

    def checkpoint(self, name: str, run: SeedRun, cfg: ExperimentConfig, regime: str,
                   use_experts: bool, extra: dict | None = None) -> Path:
        tcfg = replace(cfg.train, regime=regime, seeds=(run.seed,))
        model = build_model(cfg.backbone, tcfg, run.seed, use_experts)
        p = save_checkpoint(self.path / "checkpoints" / f"{name}.npz", run.state, cfg.backbone,
                            tcfg, run.seed, use_experts,
                            {"selected_epoch": run.selected_epoch, **(extra or {})},
                            frozen_digest(model))
        return self._out("checkpoint", p)

    def routing(self, name: str, participant_id, task_id, weights) -> Path:
        p = self.path / "routing" / f"{name}.csv"
        p.parent.mkdir(parents=True, exist_ok=True)
        write_routing_csv(p, participant_id, task_id, weights)
        return self._out("routing", p)

    def write_json(self, name: str, obj) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
        return self._out(name.split(".")[0], p)

    def finish(self) -> None:
        self._out("metrics", self.path / "metrics.jsonl")


def record_result(rd: RunDir, cfg: ExperimentConfig, result: RunResult,
                  per_task: list[RunResult] | None = None) -> dict:
    """Write histories, checkpoints, routing logs and the summary of a finished regime."""
    regime = result.regime
    use_experts = regime in ("joint_mode", "two_stage")
    if per_task is not None:
        for res in per_task:
            t = res.tasks[0]
            for run in res.runs:
                rd.log_history(run, task=t)
                rd.checkpoint(f"seed{run.seed}_task{t}", run, cfg, regime, False, {"task": t})
    for run in result.runs:
        if per_task is None:
            rd.log_history(run)
            rd.checkpoint(f"seed{run.seed}", run, cfg, regime, use_experts)
        if run.test.routing is not None:
            p = run.test.predictions
            rd.routing(f"test_seed{run.seed}", p.participant_id, p.task_id, run.test.routing)
        if "stage1_routing" in run.extra:
            pid, tid, w = run.extra["stage1_routing"]
            rd.routing(f"stage1_dev_seed{run.seed}", pid, tid, w)
        rd.log({"kind": "test", "seed": run.seed, "average_accuracy": run.average_accuracy,
                "task_accuracy": run.task_accuracy})
    mean, se = result.average_accuracy()
    summary = {
        "regime": regime,
        "seeds": result.seeds,
        "tasks": result.tasks,
        "average_accuracy": {"mean": mean, "stderr": se,
                             "per_seed": [r.average_accuracy for r in result.runs]},
        "task_accuracy": {t: {"mean": m, "stderr": s}
                          for t, (m, s) in result.task_accuracy().items()},
        "routing_entropy": result.final_entropy(),
    }
    rd.write_json("summary.json", summary)
    rd.finish()
    return summary
