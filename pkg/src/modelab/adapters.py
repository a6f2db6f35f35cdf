"""DoRA adapters and mixtures of DoRA experts over frozen weight matrices.

Weights follow the ``d_out x d_in`` convention (``y = x @ W.T``). The
magnitude vector holds one entry per input column, so the direction
``V / ||V||_c`` has unit-norm columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DomainError, SingularityError

MAGNITUDE_MODES = ("column", "scalar")


def _direction_norm(v: Tensor, magnitude: str) -> Tensor:
    if magnitude == "column":
        n = ad.column_norm(v)
    else:
        n = ad.frobenius_norm(v)
    if np.any(n.data == 0):
        raise SingularityError("adapted weight has a zero column")
    return n


def _initial_magnitude(w0: np.ndarray, magnitude: str) -> np.ndarray:
    if magnitude == "column":
        return np.sqrt(np.sum(w0 * w0, axis=0, keepdims=True))
    if magnitude == "scalar":
        return np.array([[np.linalg.norm(w0)]])
    raise ConfigurationError(f"magnitude must be one of {MAGNITUDE_MODES}, got {magnitude!r}")


@dataclass
class DoraAdapter:
    """One low-rank direction update ``B @ A`` plus a trainable magnitude."""

    A: Tensor
    B: Tensor
    m: Tensor
    rank: int
    alpha: float
    magnitude: str = "column"

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B, self.m]

    def named_parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B, "m": self.m}


@dataclass
class MoDEBank:
    """E DoRA experts sharing one magnitude; ``A`` is E x r x d_in, ``B`` is E x d_out x r."""

    A: Tensor
    B: Tensor
    m: Tensor
    rank: int
    alpha: float
    magnitude: str = "column"

    @property
    def n_experts(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def expert(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.A.data[i], self.B.data[i]

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B, self.m]

    def named_parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B, "m": self.m}


def recompose(w0: Tensor, delta: Tensor, m: Tensor, magnitude: str = "column") -> Tensor:
    """``m * (W0 + delta) / ||W0 + delta||``; ``delta`` may carry a leading batch axis."""
    if magnitude not in MAGNITUDE_MODES:
        raise ConfigurationError(f"magnitude must be one of {MAGNITUDE_MODES}")
    return ad.magnitude_direction(w0 + delta, m, per_column=magnitude == "column")


def recompose_reference(w0: Tensor, delta: Tensor, m: Tensor, magnitude: str = "column") -> Tensor:
    """Unfused composition of elementary ops; same value as ``recompose``."""
    v = w0 + delta
    return m * (v / _direction_norm(v, magnitude))


def dora_effective_weight(w0, adapter: DoraAdapter) -> Tensor:
    w0 = ad.as_tensor(w0)
    if adapter.B.shape[0] != w0.shape[0] or adapter.A.shape[1] != w0.shape[1]:
        raise ConfigurationError(
            f"adapter shapes {adapter.B.shape} x {adapter.A.shape} do not fit weight {w0.shape}")
    delta = ad.scale(adapter.B @ adapter.A, adapter.scaling)
    return recompose(w0, delta, adapter.m, adapter.magnitude)


def check_mixture_weights(w: np.ndarray, n_experts: int, atol: float = 1e-8) -> None:
    if w.shape[-1] != n_experts:
        raise ConfigurationError(f"expected {n_experts} expert weights, got {w.shape[-1]}")
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > atol):
        raise DomainError("expert weights must be non-negative and sum to 1")


def mixed_update(bank: MoDEBank, w: Tensor) -> Tensor:
    """``(alpha/r) * sum_i w_i B_i A_i`` for w of shape E (-> o x i) or N x E (-> N x o x i)."""
    e, o, i = bank.n_experts, bank.B.shape[1], bank.A.shape[2]
    products = ad.reshape(bank.B @ bank.A, (e, o * i))
    if w.ndim == 1:
        mixed = ad.reshape(ad.reshape(w, (1, e)) @ products, (o, i))
    else:
        mixed = ad.reshape(w @ products, (w.shape[0], o, i))
    return ad.scale(mixed, bank.scaling)


def mode_effective_weight(w0, bank: MoDEBank, w) -> Tensor:
    """Effective weight under expert weights ``w`` (E, or N x E for per-example weights)."""
    w0 = ad.as_tensor(w0)
    w = ad.as_tensor(w)
    check_mixture_weights(w.data, bank.n_experts)
    if bank.B.shape[1] != w0.shape[0] or bank.A.shape[2] != w0.shape[1]:
        raise ConfigurationError("expert shapes do not fit the weight matrix")
    return recompose(w0, mixed_update(bank, w), bank.m, bank.magnitude)


def init_adapter(w0: np.ndarray, rank: int = 32, alpha: float = 64.0,
                 n_experts: int | None = None, seed: int | np.random.Generator = 0,
                 magnitude: str = "column") -> DoraAdapter | MoDEBank:
    """Fresh adapter for ``w0``: B zero, A ~ N(0, 1/d_in), m = ||W0||.

    Returns a ``MoDEBank`` when ``n_experts`` is given, else a ``DoraAdapter``.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    d_out, d_in = w0.shape
    if rank < 1 or rank > min(d_out, d_in):
        raise ConfigurationError(f"rank {rank} outside [1, {min(d_out, d_in)}] for {w0.shape}")
    if n_experts is not None and n_experts < 1:
        raise ConfigurationError("n_experts must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = Tensor(_initial_magnitude(w0, magnitude), requires_grad=True)
    std = 1.0 / np.sqrt(d_in)
    if n_experts is None:
        A = Tensor(rng.normal(0.0, std, (rank, d_in)), requires_grad=True)
        B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        return DoraAdapter(A, B, m, rank, float(alpha), magnitude)
    A = Tensor(rng.normal(0.0, std, (n_experts, rank, d_in)), requires_grad=True)
    B = Tensor(np.zeros((n_experts, d_out, rank)), requires_grad=True)
    return MoDEBank(A, B, m, rank, float(alpha), magnitude)
