"""Bit-exact model checkpoints as ``.npz`` archives.

An archive holds every trainable array under its registry name plus a JSON
header with the backbone and training configs, the seed, and the regime.
The frozen backbone is not stored: it is rebuilt from its config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .routing import Model
from .training import TrainConfig, build_model, frozen_digest, restore

FORMAT = "modelab-checkpoint/1"
_HEADER = "__header__"


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], bcfg: BackboneConfig,
                    cfg: TrainConfig, seed: int, use_experts: bool, extra: dict | None = None,
                    frozen_hash: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT,
        "backbone": asdict(bcfg),
        "train": cfg.to_dict(),
        "seed": int(seed),
        "use_experts": bool(use_experts),
        "frozen_hash": frozen_hash,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in state.items()}
    arrays[_HEADER] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z[_HEADER]).decode())
        state = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} archive")
    return header, state


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    """Rebuild the model and restore its parameters; returns (model, header)."""
    header, state = read_checkpoint(path)
    bcfg = BackboneConfig(**header["backbone"])
    cfg = TrainConfig(**header["train"])
    model = build_model(bcfg, cfg, header["seed"], header["use_experts"])
    expected = set(model.trainable_parameters())
    if expected != set(state):
        missing, unknown = sorted(expected - set(state)), sorted(set(state) - expected)
        raise ValueError(f"{path}: parameter mismatch (missing {missing[:3]}, unknown {unknown[:3]})")
    restore(model, state)
    if header.get("frozen_hash") and frozen_digest(model) != header["frozen_hash"]:
        raise ValueError(f"{path}: rebuilt backbone differs from the one trained")
    task = header["extra"].get("task")
    if task is not None:
        model.task_scope = {int(task)}
    return model, header
