"""Temperature-scaled expert routing and the load-balancing objective.

Routing is decoupled: expert weights come from an adapter-free pass of the
backbone, then the same per-example weights drive every expert bank in a
second, adapter-active pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import OFF, AdapterMode, Backbone, SequenceBatch
from .errors import ConfigurationError, DomainError


@dataclass
class Router:
    weight: Tensor  # d_model x E
    bias: Tensor  # E
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError("router temperature must be positive")

    @classmethod
    def create(cls, d_model: int, n_experts: int, temperature: float = 1.0,
               seed: int | np.random.Generator = 0, init_scale: float = 0.02) -> Router:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        w = rng.normal(0.0, init_scale, (d_model, n_experts))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(n_experts), requires_grad=True),
                   float(temperature))

    @property
    def n_experts(self) -> int:
        return self.bias.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        return {"router.weight": self.weight, "router.bias": self.bias}


@dataclass
class RoutingOutput:
    logits: Tensor
    weights: Tensor
    temperature: float


def route(last_hidden: Tensor, router: Router, temperature: float | None = None) -> RoutingOutput:
    t = router.temperature if temperature is None else temperature
    logits = last_hidden @ router.weight + router.bias
    return RoutingOutput(logits, ad.softmax(logits, t, axis=-1), t)


def routing_entropy(weights: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy in nats."""
    w = np.asarray(weights)
    safe = np.where(w > 0, w, 1.0)
    return -np.sum(w * np.log(safe), axis=-1)


def load_balance(weights: Tensor, kind: str = "example") -> Tensor:
    """KL to uniform averaged per example, or of the batch-mean importance."""
    if kind == "example":
        return ad.kl_uniform(weights)
    if kind == "batch":
        return ad.kl_uniform(ad.mean(weights, axis=0, keepdims=True))
    raise ConfigurationError(f"unknown load-balance kind {kind!r}")


def total_loss(ce: Tensor, weights: Tensor, lambda_lb: float, kind: str = "example") -> Tensor:
    if lambda_lb < 0:
        raise ConfigurationError("lambda_lb must be non-negative")
    if lambda_lb == 0:
        return ce
    return ce + ad.scale(load_balance(weights, kind), lambda_lb)


class Model:
    """A backbone with installed adapters and, for expert banks, a router."""

    def __init__(self, backbone: Backbone, router: Router | None = None,
                 stop_gradient: bool = False):
        self.backbone = backbone
        self.router = router
        self.stop_gradient = stop_gradient
        self.task_scope: set[int] | None = None

    @property
    def uses_experts(self) -> bool:
        return self.router is not None

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = self.backbone.trainable_parameters()
        if self.router is not None:
            params.update(self.router.named_parameters())
        return params

    def route_batch(self, batch: SequenceBatch, hidden: np.ndarray | None = None) -> RoutingOutput:
        """Route from the adapter-free pass; ``hidden`` may supply that pass precomputed."""
        if hidden is None:
            with ad.no_grad():
                hidden = self.backbone.encode(batch, OFF).data
        return route(Tensor(hidden), self.router)

    def forward_mode(self, batch: SequenceBatch, weights: Tensor | None = None,
                     hidden: np.ndarray | None = None) -> tuple[Tensor, RoutingOutput]:
        """Two-pass forward: route on the adapter-free pass, classify with experts.

        ``weights`` overrides the router (used for one-hot task assignment).
        """
        if self.router is None and weights is None:
            raise ConfigurationError("forward_mode needs a router or explicit weights")
        if weights is None:
            routing = self.route_batch(batch, hidden)
        else:
            w = ad.as_tensor(weights)
            routing = RoutingOutput(w, w, float("nan"))
        w = routing.weights.detach() if self.stop_gradient else routing.weights
        logits, _ = self.backbone.forward(batch, AdapterMode.mode(w))
        return logits, routing

    def predict_logits(self, batch: SequenceBatch, hidden: np.ndarray | None = None
                       ) -> tuple[Tensor, RoutingOutput | None]:
        if self.task_scope is not None:
            bad = set(np.unique(batch.task_id).tolist()) - self.task_scope
            if bad:
                raise ConfigurationError(
                    f"model trained on tasks {sorted(self.task_scope)} cannot score tasks {sorted(bad)}")
        if self.uses_experts:
            return self.forward_mode(batch, hidden=hidden)
        logits, _ = self.backbone.forward(batch, AdapterMode.dora()
                                          if self.backbone.adapters else OFF)
        return logits, None


ROUTING_HEADER_PREFIX = ("participant_id", "task_id")


def write_routing_csv(path: str | Path, participant_id: Iterable[int], task_id: Iterable[int],
                      weights: np.ndarray) -> Path:
    """One row per example: participant_id, task_id, w_1..w_E."""
    path = Path(path)
    weights = np.asarray(weights)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([*ROUTING_HEADER_PREFIX, *(f"w_{i + 1}" for i in range(weights.shape[1]))])
        for pid, tid, row in zip(participant_id, task_id, weights):
            out.writerow([int(pid), int(tid), *(repr(float(v)) for v in row)])
    return path


def read_routing_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:2]) != ROUTING_HEADER_PREFIX or len(header) < 3:
            raise ValueError(f"malformed routing CSV header: {header}")
        rows = list(reader)
    e = len(header) - 2
    if any(len(r) != e + 2 for r in rows):
        raise ValueError("routing CSV row has the wrong number of columns")
    pid = np.array([int(r[0]) for r in rows], dtype=np.int64)
    tid = np.array([int(r[1]) for r in rows], dtype=np.int64)
    w = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), e)
    return pid, tid, w
