"""Deterministic synthetic multi-task corpus with participant-level labels.

Each participant carries one binary label ``z``. Every task record is a
sequence of AR(1) noise plus a task signature offset plus
``snr[t] * M_t @ u``. The signal vector ``u`` is ``z``-signed and mixes a
direction common to all tasks with a second direction that ``M_t`` rotates
per task family, plus a participant-level deviation. One outlier task
rotates the whole signal with an unrelated transform.

Splits are by participant with floor-then-largest-remainder sizing; test
participants are drawn only from those who completed every task.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import SequenceBatch
from .errors import ConfigurationError

SPLITS = ("train", "dev", "test")
DEFAULT_FAMILIES = (0, 1, 1, 1, 2, 2, 3, 3, 3, 4)
DEFAULT_SNR = (0.18, 0.156, 0.18, 0.204, 0.168, 0.144, 0.168, 0.192, 0.18, 0.18)


@dataclass
class SynthConfig:
    n_participants: int = 1223
    n_tasks: int = 10
    p_positive: float = 0.534
    seq_len: int = 32
    d_in: int = 16
    snr: tuple[float, ...] = DEFAULT_SNR
    families: tuple[int, ...] = DEFAULT_FAMILIES
    outlier_task: int | None = 9
    transform_seeds: tuple[int, ...] | None = None
    shared_fraction: float = 0.7
    participant_spread: float = 0.5
    signature_scale: float = 2.0
    noise_ar: float = 0.5
    completion_rate: float = 1.0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.snr = tuple(float(s) for s in self.snr)
        self.families = tuple(int(f) for f in self.families)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.transform_seeds is not None:
            self.transform_seeds = tuple(int(s) for s in self.transform_seeds)
        if self.n_tasks < 1 or self.n_participants < 1:
            raise ConfigurationError("n_tasks and n_participants must be positive")
        if not 0 < self.p_positive < 1:
            raise ConfigurationError("p_positive must lie in (0, 1)")
        if len(self.snr) != self.n_tasks or any(s <= 0 for s in self.snr):
            raise ConfigurationError("snr needs one positive value per task")
        if len(self.families) != self.n_tasks:
            raise ConfigurationError("families needs one entry per task")
        if self.transform_seeds is not None and len(self.transform_seeds) != self.n_tasks:
            raise ConfigurationError("transform_seeds needs one entry per task")
        if self.outlier_task is not None and not 0 <= self.outlier_task < self.n_tasks:
            raise ConfigurationError("outlier_task out of range")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios) \
                or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigurationError("split_ratios must be three non-negative values summing to 1")
        if not 0 < self.completion_rate <= 1:
            raise ConfigurationError("completion_rate must lie in (0, 1]")
        if not 0 <= self.shared_fraction <= 1:
            raise ConfigurationError("shared_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class MultiTaskDataset:
    config: SynthConfig
    participant_id: np.ndarray  # N
    task_id: np.ndarray  # N
    label: np.ndarray  # N
    features: np.ndarray  # N x L x d_in
    participant_label: np.ndarray  # P
    completion: np.ndarray  # P x T bool
    split: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))  # P, index into SPLITS

    def __len__(self) -> int:
        return len(self.label)

    @property
    def n_tasks(self) -> int:
        return self.config.n_tasks

    def record_split(self) -> np.ndarray:
        return self.split[self.participant_id]

    def indices(self, split: str | None = None, task: int | None = None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.record_split() == SPLITS.index(split)
        if task is not None:
            mask &= self.task_id == task
        return np.flatnonzero(mask)

    def participants(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split))

    def batch(self, idx: np.ndarray) -> SequenceBatch:
        return SequenceBatch(self.features[idx], self.task_id[idx], self.label[idx],
                             self.participant_id[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.participant_id, self.task_id, self.label, self.features,
                    self.completion, self.split):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def task_transforms(cfg: SynthConfig, shared_dir: np.ndarray) -> np.ndarray:
    """One d_in x d_in transform per task; tasks in a family share it.

    Each transform keeps the shared direction and rotates its orthogonal
    complement. The outlier task instead gets an unrestricted rotation from
    its own stream, so it shares no direction with the others.
    """
    d = cfg.d_in
    seeds = cfg.transform_seeds
    proj = np.outer(shared_dir, shared_dir)
    # orthonormal basis of the complement of the shared direction
    basis = np.linalg.svd(np.eye(d) - proj)[0][:, : d - 1]

    def build(stream) -> np.ndarray:
        q = _orthogonal(np.random.default_rng([cfg.seed, *stream]), d - 1)
        return proj + basis @ q @ basis.T

    cache: dict[int, np.ndarray] = {}
    out = np.empty((cfg.n_tasks, d, d))
    for t in range(cfg.n_tasks):
        if t == cfg.outlier_task:
            out[t] = _orthogonal(np.random.default_rng(
                [cfg.seed, 901, t if seeds is None else seeds[t]]), d)
        elif seeds is not None:
            out[t] = build((902, seeds[t]))
        else:
            fam = cfg.families[t]
            if fam not in cache:
                cache[fam] = build((903, fam))
            out[t] = cache[fam]
    return out


def _ar_noise(rng: np.random.Generator, n: int, L: int, d: int, phi: float) -> np.ndarray:
    eps = rng.normal(size=(n, L, d))
    out = np.empty_like(eps)
    out[:, 0] = eps[:, 0]
    innov = np.sqrt(1.0 - phi * phi)
    for l in range(1, L):
        out[:, l] = phi * out[:, l - 1] + innov * eps[:, l]
    return out


def generate(cfg: SynthConfig) -> MultiTaskDataset:
    """Build the full corpus and its participant split from ``cfg`` alone."""
    P, T, L, d = cfg.n_participants, cfg.n_tasks, cfg.seq_len, cfg.d_in
    root = np.random.default_rng([cfg.seed, 1])
    # exact positive count, randomly placed
    z = np.zeros(P, dtype=np.int64)
    z[root.permutation(P)[: int(round(cfg.p_positive * P))]] = 1
    sign = (2 * z - 1).astype(np.float64)

    struct = np.random.default_rng([cfg.seed, 2])
    shared_dir = _unit(struct, d)
    specific = _unit(struct, d)
    specific -= shared_dir * (specific @ shared_dir)
    specific /= np.linalg.norm(specific)
    signatures = np.stack([_unit(struct, d) for _ in range(T)]) * cfg.signature_scale
    transforms = task_transforms(cfg, shared_dir)

    # participant-level deviation shared by all of that participant's tasks
    spread = root.normal(size=(P, d)) * cfg.participant_spread / np.sqrt(d)

    completion = np.ones((P, T), dtype=bool)
    if cfg.completion_rate < 1:
        completion = root.random((P, T)) < cfg.completion_rate
        completion[np.arange(P), root.integers(0, T, P)] = True

    a, b = np.sqrt(cfg.shared_fraction), np.sqrt(1.0 - cfg.shared_fraction)
    pid_l, tid_l, feat_l = [], [], []
    for t in range(T):
        members = np.flatnonzero(completion[:, t])
        rng = np.random.default_rng([cfg.seed, 100 + t])
        u = sign[members, None] * (a * shared_dir + b * specific) + spread[members]
        signal = cfg.snr[t] * u @ transforms[t].T
        x = _ar_noise(rng, len(members), L, d, cfg.noise_ar)
        x += signatures[t] + signal[:, None, :]
        pid_l.append(members)
        tid_l.append(np.full(len(members), t))
        feat_l.append(x)
    pid = np.concatenate(pid_l)
    tid = np.concatenate(tid_l)
    order = np.lexsort((tid, pid))
    ds = MultiTaskDataset(
        config=cfg,
        participant_id=pid[order].astype(np.int64),
        task_id=tid[order].astype(np.int64),
        label=z[pid[order]],
        features=np.concatenate(feat_l)[order],
        participant_label=z,
        completion=completion,
    )
    ds.split = assign_splits(completion, cfg.split_ratios, cfg.seed)
    return ds


def split_sizes(n: int, ratios) -> list[int]:
    """Floor each share, then hand leftovers to the largest fractional remainders."""
    raw = [n * r for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    rema = [x - s for x, s in zip(raw, sizes)]
    for i in sorted(range(len(raw)), key=lambda k: (-rema[k], k))[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def assign_splits(completion: np.ndarray, ratios, seed: int) -> np.ndarray:
    """Split tag per participant; test is drawn from fully-complete participants."""
    P = completion.shape[0]
    n_train, n_dev, n_test = split_sizes(P, ratios)
    if min(n_train, n_dev, n_test) == 0:
        raise ConfigurationError(f"split sizes {(n_train, n_dev, n_test)} leave an empty split")
    rng = np.random.default_rng([seed, 3])
    complete = np.flatnonzero(completion.all(axis=1))
    if len(complete) < n_test:
        raise ConfigurationError("not enough fully-complete participants for the test split")
    test = rng.permutation(complete)[:n_test]
    rest = np.setdiff1d(np.arange(P), test)
    rest = rng.permutation(rest)
    tags = np.empty(P, dtype=np.int8)
    tags[test] = 2
    tags[rest[:n_train]] = 0
    tags[rest[n_train:]] = 1
    return tags


def split(ds: MultiTaskDataset, ratios=None, seed: int | None = None
          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Record indices of (train, dev, test), re-splitting if ``ratios``/``seed`` are given."""
    if ratios is not None or seed is not None:
        ds.split = assign_splits(ds.completion, ratios or ds.config.split_ratios,
                                 ds.config.seed if seed is None else seed)
    return tuple(ds.indices(s) for s in SPLITS)


# serialization

def save_dataset(ds: MultiTaskDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / "records.npz", participant_id=ds.participant_id, task_id=ds.task_id,
             label=ds.label, features=ds.features, participant_label=ds.participant_label,
             completion=ds.completion, split=ds.split)
    manifest = {
        "format": "modelab-dataset/1",
        "columns": {
            "participant_id": "int64 [N]", "task_id": "int64 [N]", "label": "int64 [N]",
            "features": "float64 [N, seq_len, d_in]", "participant_label": "int64 [P]",
            "completion": "bool [P, T]", "split": "int8 [P] (0 train, 1 dev, 2 test)",
        },
        "config": ds.config.to_dict(),
        "config_hash": ds.config.digest(),
        "data_hash": ds.fingerprint(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_dataset(directory: str | Path) -> MultiTaskDataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset at {directory}; run the generate command first")
    manifest = json.loads(mpath.read_text())
    cfg = SynthConfig(**manifest["config"])
    if cfg.digest() != manifest["config_hash"]:
        raise ValueError("dataset manifest config hash mismatch")
    with np.load(directory / "records.npz") as arrs:
        ds = MultiTaskDataset(config=cfg, **{k: arrs[k] for k in arrs.files})
    if ds.fingerprint() != manifest["data_hash"]:
        raise ValueError("dataset contents do not match the manifest hash")
    return ds
