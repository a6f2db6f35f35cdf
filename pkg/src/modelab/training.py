"""Training regimes: separate per-task models, joint DoRA, joint MoDE, two-stage MoDE.

All regimes share one optimization protocol: AdamW with a cosine learning
rate decay, a fixed number of epochs, and selection of the epoch with the
best dev accuracy (earliest epoch on ties). Every seed re-draws adapters,
head, router and batch order; the frozen backbone is the same for all runs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import OFF, Backbone, BackboneConfig
from .calibration import Predictions, per_task_accuracy
from .errors import ConfigurationError
from .routing import Model, Router, routing_entropy, total_loss
from .synthdata import MultiTaskDataset

REGIMES = ("separate", "joint", "joint_mode", "two_stage")

# independent random streams per seed
_ADAPTER, _ROUTER, _HEAD, _SHUFFLE, _STAGE2_ROUTER = range(1, 6)


@dataclass
class TrainConfig:
    regime: str = "joint_mode"
    epochs: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 0
    weight_decay: float = 0.01
    lambda_lb: float = 0.01
    lb_kind: str = "example"
    temperature: float = 1.0
    n_experts: int = 10
    rank: int = 32
    alpha: float = 64.0
    magnitude: str = "column"
    stop_gradient: bool = False
    router_init_scale: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2)
    stage1_epochs: int = 2
    eval_batch_size: int = 512

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be at least 1")
        if self.n_experts < 1:
            raise ConfigurationError("n_experts must be at least 1")
        if self.lambda_lb < 0:
            raise ConfigurationError("lambda_lb must be non-negative")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.warmup_steps < 0 or self.stage1_epochs < 0:
            raise ConfigurationError("warmup_steps and stage1_epochs must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# optimization

def cosine_lr(step: int, total_steps: int, peak: float, warmup: int = 0) -> float:
    """Linear warmup then half-cosine decay to zero at ``total_steps``."""
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _decays(name: str) -> bool:
    return not (name.endswith(".m") or name.endswith(".b") or name.endswith("bias"))


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and _decays(k):
                update = update + self.weight_decay * p.data
            p.data -= lr * update


# model construction

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def build_model(bcfg: BackboneConfig, cfg: TrainConfig, seed: int, use_experts: bool) -> Model:
    backbone = Backbone(bcfg)
    head_rng = _rng(seed, _HEAD)
    backbone.head["W"].data = head_rng.normal(0.0, 1.0 / np.sqrt(bcfg.d_model),
                                              backbone.head["W"].shape)
    backbone.install_adapters(cfg.rank, cfg.alpha, cfg.n_experts if use_experts else None,
                              seed=int(_rng(seed, _ADAPTER).integers(2 ** 63)),
                              magnitude=cfg.magnitude)
    router = None
    if use_experts:
        router = Router.create(bcfg.d_model, cfg.n_experts, cfg.temperature,
                               _rng(seed, _ROUTER), cfg.router_init_scale)
    return Model(backbone, router, stop_gradient=cfg.stop_gradient)


def precompute_hidden(backbone: Backbone, ds: MultiTaskDataset, batch_size: int = 512) -> np.ndarray:
    """Adapter-free pooled hidden state of every record (constant under a frozen backbone)."""
    out = np.empty((len(ds), backbone.config.d_model))
    with ad.no_grad():
        for s in range(0, len(ds), batch_size):
            idx = np.arange(s, min(s + batch_size, len(ds)))
            out[idx] = backbone.encode(ds.batch(idx), OFF).data
    return out


def snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.trainable_parameters().items()}


def restore(model: Model, state: dict[str, np.ndarray]) -> None:
    params = model.trainable_parameters()
    for k, v in state.items():
        params[k].data = v.copy()


def frozen_digest(model: Model) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(model.backbone.frozen):
        h.update(model.backbone.frozen[k].data.tobytes())
    return h.hexdigest()


# evaluation

@dataclass
class Scored:
    predictions: Predictions
    routing: np.ndarray | None


def predict(model: Model, ds: MultiTaskDataset, idx: np.ndarray, hidden: np.ndarray | None = None,
            batch_size: int = 512, weights_fn: Callable | None = None) -> Scored:
    probs, routes = [], []
    with ad.no_grad():
        for s in range(0, len(idx), batch_size):
            part = idx[s:s + batch_size]
            batch = ds.batch(part)
            h = None if hidden is None else hidden[part]
            if weights_fn is not None:
                logits, routing = model.forward_mode(batch, weights=weights_fn(batch))
            else:
                logits, routing = model.predict_logits(batch, h)
            z = logits.data - logits.data.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            probs.append(p[:, 1])
            if routing is not None:
                routes.append(routing.weights.data)
    preds = Predictions(ds.participant_id[idx], ds.task_id[idx], ds.label[idx],
                        np.concatenate(probs) if probs else np.zeros(0))
    return Scored(preds, np.concatenate(routes) if routes else None)


# results

@dataclass
class SeedRun:
    seed: int
    train_loss: list[float]
    dev_accuracy: list[float]
    routing_entropy: list[float]
    selected_epoch: int
    task_accuracy: dict[int, float]
    test: Scored
    state: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(list(self.task_accuracy.values())))


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample-std / sqrt(n); stderr is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


@dataclass
class RunResult:
    regime: str
    tasks: list[int]
    runs: list[SeedRun]
    label: str = ""

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    def task_accuracy(self) -> dict[int, tuple[float, float]]:
        return {t: mean_stderr([r.task_accuracy[t] for r in self.runs]) for t in self.tasks}

    def average_accuracy(self) -> tuple[float, float]:
        return mean_stderr([r.average_accuracy for r in self.runs])

    def final_entropy(self) -> list[float]:
        return [r.routing_entropy[-1] for r in self.runs if r.routing_entropy]


def merge_separate(results: Sequence[RunResult]) -> RunResult:
    """Fold per-task separate runs into one result with pooled test predictions per seed."""
    tasks = [t for r in results for t in r.tasks]
    runs = []
    for i, seed in enumerate(results[0].seeds):
        parts = [r.runs[i] for r in results]
        preds = Predictions.concat([p.test.predictions for p in parts])
        acc = {t: a for p in parts for t, a in p.task_accuracy.items()}
        runs.append(SeedRun(seed, [], [], [], -1, acc, Scored(preds, None), {},
                            {"selected_epochs": [p.selected_epoch for p in parts]}))
    return RunResult("separate", tasks, runs, "separate")


# training loop

def _fit(model: Model, ds: MultiTaskDataset, train_idx: np.ndarray, dev_idx: np.ndarray,
         cfg: TrainConfig, seed: int, epochs: int, hidden: np.ndarray | None,
         params: dict[str, Tensor], weights_fn: Callable | None = None,
         lambda_lb: float | None = None, shuffle_stream: int = _SHUFFLE,
         on_step: Callable | None = None) -> dict:
    """Optimize ``params`` for ``epochs``; keep the dev-best trainable state."""
    lam = cfg.lambda_lb if lambda_lb is None else lambda_lb
    opt = AdamW(params, cfg.weight_decay)
    n_batches = math.ceil(len(train_idx) / cfg.batch_size)
    total = epochs * n_batches
    rng = _rng(seed, shuffle_stream)
    frozen_before = frozen_digest(model)
    hist = {"train_loss": [], "dev_accuracy": [], "routing_entropy": [], "lr": []}
    best_acc, best_epoch, best_state = -1.0, -1, snapshot(model)
    step = 0
    for epoch in range(epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        losses, ents = [], []
        for b in range(n_batches):
            part = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = ds.batch(part)
            opt.zero_grad()
            if model.uses_experts or weights_fn is not None:
                fixed = None if weights_fn is None else weights_fn(batch)
                h = None if hidden is None else hidden[part]
                logits, routing = model.forward_mode(batch, weights=fixed, hidden=h)
                ce = ad.cross_entropy(logits, batch.label)
                loss = ce if fixed is not None else total_loss(ce, routing.weights, lam, cfg.lb_kind)
                ents.append(float(routing_entropy(routing.weights.data).mean()))
            else:
                logits, _ = model.predict_logits(batch)
                loss = ad.cross_entropy(logits, batch.label)
            loss.backward()
            lr = cosine_lr(step, total, cfg.lr, cfg.warmup_steps)
            opt.step(lr)
            if on_step is not None:
                on_step(step, loss.item())
            hist["lr"].append(lr)
            losses.append(loss.item())
            step += 1
        dev = predict(model, ds, dev_idx, hidden, cfg.eval_batch_size, weights_fn)
        acc = float(np.mean(dev.predictions.correct))
        hist["train_loss"].append(float(np.mean(losses)))
        hist["dev_accuracy"].append(acc)
        if ents:
            hist["routing_entropy"].append(float(np.mean(ents)))
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, snapshot(model)
    if frozen_digest(model) != frozen_before:
        raise RuntimeError("frozen backbone parameters changed during training")
    hist["selected_epoch"] = best_epoch
    hist["best_state"] = best_state
    hist["final_state"] = snapshot(model)
    return hist


def _check_tasks(ds: MultiTaskDataset, tasks: Sequence[int], split: str = "train") -> None:
    for t in tasks:
        if len(ds.indices(split, t)) == 0:
            raise ConfigurationError(f"task {t} has no {split} records")


def _finish(model: Model, ds: MultiTaskDataset, hist: dict, seed: int, test_idx: np.ndarray,
            hidden, cfg: TrainConfig, extra: dict | None = None) -> SeedRun:
    restore(model, hist["best_state"])
    test = predict(model, ds, test_idx, hidden, cfg.eval_batch_size)
    return SeedRun(seed, hist["train_loss"], hist["dev_accuracy"], hist["routing_entropy"],
                   hist["selected_epoch"], per_task_accuracy(test.predictions), test,
                   hist["best_state"], extra or {})


def _backbone_cfg(ds: MultiTaskDataset, bcfg: BackboneConfig | None) -> BackboneConfig:
    bcfg = bcfg or BackboneConfig()
    if bcfg.d_in != ds.config.d_in or bcfg.max_seq_len < ds.config.seq_len \
            or bcfg.n_tasks != ds.config.n_tasks:
        bcfg = replace(bcfg, d_in=ds.config.d_in, n_tasks=ds.config.n_tasks,
                       max_seq_len=max(bcfg.max_seq_len, ds.config.seq_len))
    return bcfg


def train_separate(cfg: TrainConfig, ds: MultiTaskDataset, bcfg: BackboneConfig | None = None,
                   tasks: Sequence[int] | None = None) -> list[RunResult]:
    """One model per task, trained, selected and tested on that task's records only."""
    bcfg = _backbone_cfg(ds, bcfg)
    tasks = list(range(ds.n_tasks)) if tasks is None else list(tasks)
    _check_tasks(ds, tasks)
    out = []
    for t in tasks:
        runs = []
        tr, dv, te = (ds.indices(s, t) for s in ("train", "dev", "test"))
        for seed in cfg.seeds:
            model = build_model(bcfg, cfg, seed, use_experts=False)
            model.task_scope = {t}
            hist = _fit(model, ds, tr, dv, cfg, seed, cfg.epochs, None,
                        model.trainable_parameters())
            runs.append(_finish(model, ds, hist, seed, te, None, cfg, {"task": t}))
        out.append(RunResult("separate", [t], runs, f"separate[{t}]"))
    return out


def train_joint(cfg: TrainConfig, ds: MultiTaskDataset, use_mode: bool = True,
                bcfg: BackboneConfig | None = None, hidden: np.ndarray | None = None,
                keep_models: bool = False, on_step: Callable | None = None) -> RunResult:
    """One model over all tasks: a single DoRA set, or expert banks with routing.

    ``on_step(seed, step, loss)`` is called after every optimizer step.
    """
    if use_mode and cfg.n_experts < 1:
        raise ConfigurationError("MoDE needs at least one expert")
    bcfg = _backbone_cfg(ds, bcfg)
    _check_tasks(ds, range(ds.n_tasks))
    tr, dv, te = (ds.indices(s) for s in ("train", "dev", "test"))
    if use_mode and hidden is None:
        hidden = precompute_hidden(Backbone(bcfg), ds)
    runs = []
    for seed in cfg.seeds:
        model = build_model(bcfg, cfg, seed, use_experts=use_mode)
        hook = None if on_step is None else (lambda step, loss, s=seed: on_step(s, step, loss))
        hist = _fit(model, ds, tr, dv, cfg, seed, cfg.epochs, hidden if use_mode else None,
                    model.trainable_parameters(), on_step=hook)
        extra = {"model": model} if keep_models else {}
        extra["final_state"] = hist["final_state"]
        runs.append(_finish(model, ds, hist, seed, te, hidden if use_mode else None, cfg, extra))
    regime = "joint_mode" if use_mode else "joint"
    return RunResult(regime, list(range(ds.n_tasks)), runs, regime)


def one_hot_tasks(n_experts: int) -> Callable:
    def weights(batch) -> Tensor:
        return Tensor(np.eye(n_experts)[np.asarray(batch.task_id)])

    return weights


def train_two_stage(cfg: TrainConfig, ds: MultiTaskDataset, bcfg: BackboneConfig | None = None,
                    hidden: np.ndarray | None = None) -> RunResult:
    """Stage I: task t trains expert t through fixed one-hot routing, router unused.
    Stage II: a fresh router is attached and everything trains with learned routing.
    """
    if cfg.n_experts != ds.n_tasks:
        raise ConfigurationError("two-stage training needs exactly one expert per task")
    bcfg = _backbone_cfg(ds, bcfg)
    _check_tasks(ds, range(ds.n_tasks))
    tr, dv, te = (ds.indices(s) for s in ("train", "dev", "test"))
    if hidden is None:
        hidden = precompute_hidden(Backbone(bcfg), ds)
    onehot = one_hot_tasks(cfg.n_experts)
    runs = []
    for seed in cfg.seeds:
        model = build_model(bcfg, cfg, seed, use_experts=True)
        router = model.router
        model.router = None
        stage1_params = model.trainable_parameters()
        stage1 = None
        if cfg.stage1_epochs:
            stage1 = _fit(model, ds, tr, dv, cfg, seed, cfg.stage1_epochs, hidden, stage1_params,
                          weights_fn=onehot)
            restore(model, stage1["best_state"])
        stage1_log = predict(model, ds, dv, None, cfg.eval_batch_size, weights_fn=onehot)
        # Stage II router is freshly initialized from its own stream
        fresh = Router.create(bcfg.d_model, cfg.n_experts, cfg.temperature,
                              _rng(seed, _STAGE2_ROUTER), cfg.router_init_scale)
        model.router = fresh
        hist = _fit(model, ds, tr, dv, cfg, seed, cfg.epochs, hidden, model.trainable_parameters(),
                    shuffle_stream=_SHUFFLE + 100)
        extra = {
            "stage1_routing": (stage1_log.predictions.participant_id, stage1_log.predictions.task_id,
                               stage1_log.routing),
            "stage1_dev_accuracy": stage1["dev_accuracy"] if stage1 else [],
            "unused_router_init": {"weight": router.weight.data.copy(),
                                   "bias": router.bias.data.copy()},
            "stage2_router_init": {"weight": Router.create(
                bcfg.d_model, cfg.n_experts, cfg.temperature, _rng(seed, _STAGE2_ROUTER),
                cfg.router_init_scale).weight.data},
        }
        runs.append(_finish(model, ds, hist, seed, te, hidden, cfg, extra))
    return RunResult("two_stage", list(range(ds.n_tasks)), runs, "two_stage")


def train(cfg: TrainConfig, ds: MultiTaskDataset, bcfg: BackboneConfig | None = None,
          hidden: np.ndarray | None = None) -> RunResult:
    """Dispatch on ``cfg.regime``; separate runs come back merged."""
    if cfg.regime == "separate":
        return merge_separate(train_separate(cfg, ds, bcfg))
    if cfg.regime == "joint":
        return train_joint(cfg, ds, False, bcfg)
    if cfg.regime == "joint_mode":
        return train_joint(cfg, ds, True, bcfg, hidden)
    return train_two_stage(cfg, ds, bcfg, hidden)


# sweeps

@dataclass
class TableRow:
    name: str
    mean: float
    stderr: float
    values: list[float]
    extra: dict = field(default_factory=dict)


def sweep_experts(cfg: TrainConfig, ds: MultiTaskDataset, e_values: Sequence[int],
                  bcfg: BackboneConfig | None = None, hidden: np.ndarray | None = None,
                  cache: dict | None = None) -> list[TableRow]:
    """Joint MoDE at each expert count; rows sorted by E."""
    if not e_values:
        raise ConfigurationError("e_values must be non-empty")
    bcfg = _backbone_cfg(ds, bcfg)
    if hidden is None:
        hidden = precompute_hidden(Backbone(bcfg), ds)
    rows = []
    for e in sorted(set(int(v) for v in e_values)):
        key = ("joint_mode", e)
        if cache is not None and key in cache:
            res = cache[key]
        else:
            res = train_joint(replace(cfg, regime="joint_mode", n_experts=e), ds, True, bcfg, hidden)
            if cache is not None:
                cache[key] = res
        vals = [r.average_accuracy for r in res.runs]
        m, s = mean_stderr(vals)
        rows.append(TableRow(str(e), m, s, vals, {"n_experts": e, "result": res}))
    return rows


def ablate(cfg: TrainConfig, ds: MultiTaskDataset, bcfg: BackboneConfig | None = None,
           hidden: np.ndarray | None = None, temperature_grid: Sequence[float] | None = None,
           full: RunResult | None = None) -> list[TableRow]:
    """Full MoDE, without temperature scaling (T = 1), and without load balancing (lambda = 0).

    With ``temperature_grid`` the full row uses the temperature with the best
    mean dev accuracy; otherwise it uses ``cfg.temperature``.
    """
    bcfg = _backbone_cfg(ds, bcfg)
    if hidden is None:
        hidden = precompute_hidden(Backbone(bcfg), ds)
    base = replace(cfg, regime="joint_mode")

    def run(c: TrainConfig) -> RunResult:
        return train_joint(c, ds, True, bcfg, hidden)

    chosen_t = cfg.temperature
    if full is None:
        if temperature_grid:
            best = None
            for t in temperature_grid:
                res = run(replace(base, temperature=float(t)))
                dev = np.mean([r.dev_accuracy[r.selected_epoch] for r in res.runs])
                if best is None or dev > best[0]:
                    best = (dev, float(t), res)
            _, chosen_t, full = best
        else:
            full = run(base)
    no_t = full if chosen_t == 1.0 else run(replace(base, temperature=1.0))
    no_lb = run(replace(base, temperature=chosen_t, lambda_lb=0.0))
    rows = []
    for name, res in (("mode", full), ("-temperature_scaling", no_t), ("-load_balancing", no_lb)):
        vals = [r.average_accuracy for r in res.runs]
        m, s = mean_stderr(vals)
        rows.append(TableRow(name, m, s, vals, {"result": res, "final_entropy": res.final_entropy(),
                                                "temperature": chosen_t if name != "-temperature_scaling" else 1.0}))
    return rows
