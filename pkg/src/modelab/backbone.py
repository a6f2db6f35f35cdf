"""A small frozen pre-LN transformer encoder with a trainable classification head.

Base weights are drawn from a fixed seed and never receive gradients. The six
linear maps of every layer (four attention projections, two feed-forward
matrices) are adapter sites; under an adapter mode the forward pass swaps
each site's frozen matrix for its effective weight.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import (DoraAdapter, MoDEBank, check_mixture_weights,
                       dora_effective_weight, init_adapter, mode_effective_weight)
from .autodiff import Tensor
from .errors import ConfigurationError

SITE_KINDS = ("attn.q", "attn.k", "attn.v", "attn.o", "ff.in", "ff.out")


@dataclass
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_classes: int = 2
    max_seq_len: int = 32
    d_in: int = 16
    n_tasks: int = 10
    task_embedding: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "n_classes", "max_seq_len", "d_in"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")


@dataclass
class SequenceBatch:
    features: np.ndarray  # B x L x d_in
    task_id: np.ndarray
    label: np.ndarray
    participant_id: np.ndarray

    def __len__(self) -> int:
        return len(self.label)


@dataclass(frozen=True)
class AdapterMode:
    """Which weights the forward pass uses: frozen, a single DoRA, or a weighted mixture."""

    kind: str
    weights: Tensor | None = field(default=None, compare=False)

    @staticmethod
    def off() -> AdapterMode:
        return AdapterMode("off")

    @staticmethod
    def dora() -> AdapterMode:
        return AdapterMode("dora")

    @staticmethod
    def mode(weights) -> AdapterMode:
        return AdapterMode("mode", ad.as_tensor(weights))


OFF = AdapterMode.off()
DORA = AdapterMode.dora()


def adapted_sites(config: BackboneConfig) -> list[str]:
    """Identifiers of every adapted weight matrix, in forward order."""
    return [f"layer{l}.{kind}" for l in range(config.n_layers) for kind in SITE_KINDS]


def _site_shape(config: BackboneConfig, kind: str) -> tuple[int, int]:
    d, f = config.d_model, config.d_ff
    return {"ff.in": (f, d), "ff.out": (d, f)}.get(kind, (d, d))


class Backbone:
    def __init__(self, config: BackboneConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        frozen: dict[str, np.ndarray] = {
            "in.W": rng.normal(0.0, 1.0 / np.sqrt(c.d_in), (c.d_model, c.d_in)),
            "in.b": np.zeros(c.d_model),
            "pos": rng.normal(0.0, 0.02, (c.max_seq_len, c.d_model)),
            "final_ln.g": np.ones(c.d_model),
            "final_ln.b": np.zeros(c.d_model),
        }
        if c.task_embedding:
            frozen["task_emb"] = rng.normal(0.0, 1.0, (c.n_tasks, c.d_model))
        for site in adapted_sites(c):
            layer, kind = site.split(".", 1)
            o, i = _site_shape(c, kind)
            frozen[f"{site}.W"] = rng.normal(0.0, 1.0 / np.sqrt(i), (o, i))
            frozen[f"{site}.b"] = np.zeros(o)
        for l in range(c.n_layers):
            for ln in ("ln1", "ln2"):
                frozen[f"layer{l}.{ln}.g"] = np.ones(c.d_model)
                frozen[f"layer{l}.{ln}.b"] = np.zeros(c.d_model)
        self.frozen = {k: Tensor(v) for k, v in frozen.items()}
        self.head = {
            "W": Tensor(rng.normal(0.0, 1.0 / np.sqrt(c.d_model), (c.n_classes, c.d_model)),
                        requires_grad=True),
            "b": Tensor(np.zeros(c.n_classes), requires_grad=True),
        }
        self.adapters: dict[str, DoraAdapter | MoDEBank] = {}
        self.sites = adapted_sites(c)

    # adapter management

    def install_adapters(self, rank: int = 32, alpha: float = 64.0,
                         n_experts: int | None = None, seed: int = 0,
                         magnitude: str = "column") -> None:
        """Attach a DoRA adapter (or a bank of ``n_experts``) to every site."""
        rng = np.random.default_rng(seed)
        self.adapters = {
            site: init_adapter(self.frozen[f"{site}.W"].data, rank, alpha, n_experts, rng, magnitude)
            for site in self.sites
        }

    @property
    def n_experts(self) -> int | None:
        banks = [a for a in self.adapters.values() if isinstance(a, MoDEBank)]
        return banks[0].n_experts if banks else None

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = {f"head.{k}": v for k, v in self.head.items()}
        for site, adapter in self.adapters.items():
            for k, v in adapter.named_parameters().items():
                params[f"adapter.{site}.{k}"] = v
        return params

    def frozen_parameters(self) -> dict[str, Tensor]:
        return dict(self.frozen)

    # forward

    def _site_weight(self, site: str, mode: AdapterMode) -> Tensor:
        w0 = self.frozen[f"{site}.W"]
        if mode.kind == "off":
            return w0
        adapter = self.adapters.get(site)
        if mode.kind == "dora":
            if not isinstance(adapter, DoraAdapter):
                raise ConfigurationError(f"site {site} has no single DoRA adapter")
            return dora_effective_weight(w0, adapter)
        if mode.kind == "mode":
            if not isinstance(adapter, MoDEBank):
                raise ConfigurationError(f"site {site} has no expert bank")
            return mode_effective_weight(w0, adapter, mode.weights)
        raise ConfigurationError(f"unknown adapter mode {mode.kind!r}")

    def _linear(self, x: Tensor, site: str, mode: AdapterMode) -> Tensor:
        return x @ self._site_weight(site, mode).T + self.frozen[f"{site}.b"]

    def _attention(self, x: Tensor, layer: int, mode: AdapterMode) -> Tensor:
        n, L, d = x.shape
        h = self.config.n_heads
        dh = d // h
        pre = f"layer{layer}.attn"

        def heads(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (n, L, h, dh)), (0, 2, 1, 3))

        q = heads(self._linear(x, f"{pre}.q", mode))
        k = heads(self._linear(x, f"{pre}.k", mode))
        v = heads(self._linear(x, f"{pre}.v", mode))
        scores = ad.scale(q @ k.T, 1.0 / np.sqrt(dh))
        ctx = ad.softmax(scores, 1.0, axis=-1) @ v
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, L, d))
        return self._linear(ctx, f"{pre}.o", mode)

    def encode(self, batch: SequenceBatch, mode: AdapterMode = OFF) -> Tensor:
        """Mean-pooled, layer-normed final hidden state (B x d_model)."""
        feats = np.asarray(batch.features, dtype=np.float64)
        n, L, _ = feats.shape
        if L > self.config.max_seq_len:
            raise ConfigurationError(f"sequence length {L} exceeds max_seq_len")
        if mode.kind == "mode":
            w = mode.weights
            e = self.n_experts
            if e is None:
                raise ConfigurationError("MoDE mode requires expert banks")
            check_mixture_weights(w.data, e)
            if w.ndim == 2 and w.shape[0] != n:
                raise ConfigurationError("per-example weights must match the batch size")
        f = self.frozen
        x = Tensor(feats) @ f["in.W"].T + f["in.b"] + Tensor(f["pos"].data[:L])
        if self.config.task_embedding:
            x = x + Tensor(f["task_emb"].data[np.asarray(batch.task_id)][:, None, :])
        for l in range(self.config.n_layers):
            p = f"layer{l}"
            a = ad.layer_norm(x, f[f"{p}.ln1.g"], f[f"{p}.ln1.b"])
            x = x + self._attention(a, l, mode)
            hdn = ad.layer_norm(x, f[f"{p}.ln2.g"], f[f"{p}.ln2.b"])
            hdn = ad.gelu(self._linear(hdn, f"{p}.ff.in", mode))
            x = x + self._linear(hdn, f"{p}.ff.out", mode)
        x = ad.layer_norm(x, f["final_ln.g"], f["final_ln.b"])
        return ad.mean_pool(x, axis=1)

    def classify(self, hidden: Tensor) -> Tensor:
        return hidden @ self.head["W"].T + self.head["b"]

    def forward(self, batch: SequenceBatch, mode: AdapterMode = OFF) -> tuple[Tensor, Tensor]:
        """Return ``(logits B x n_classes, last_hidden B x d_model)``."""
        hidden = self.encode(batch, mode)
        return self.classify(hidden), hidden

    def config_dict(self) -> dict:
        return asdict(self.config)
