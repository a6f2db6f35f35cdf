"""
DoRA and mixtures of DoRA experts
=================================

A frozen matrix W0 is split into a per-column magnitude and a unit-norm
direction. DoRA trains a low-rank update to the direction and a free
magnitude; a MoDE bank holds several low-rank updates that a router mixes
per example before the same recomposition.
"""

import numpy as np

from modelab.adapters import (dora_effective_weight, init_adapter, mixed_update,
                              mode_effective_weight)
from modelab.autodiff import Tensor

rng = np.random.default_rng(0)
w0 = rng.normal(size=(6, 4))

# a fresh adapter has B = 0 and m = ||W0||_c, so it reproduces W0 exactly
a = init_adapter(w0, rank=2, alpha=4.0, seed=1)
print("fresh DoRA == W0:", np.allclose(dora_effective_weight(w0, a).data, w0, atol=1e-14))

# after an update the columns still carry exactly the magnitudes in m
a.B.data[...] = rng.normal(size=a.B.shape)
w = dora_effective_weight(w0, a).data
print("column norms:", np.round(np.linalg.norm(w, axis=0), 4))
print("magnitudes:  ", np.round(a.m.data[0], 4))

# %%
# A bank of four experts shares one magnitude vector
bank = init_adapter(w0, rank=2, alpha=4.0, n_experts=4, seed=2)
bank.B.data[...] = rng.normal(size=bank.B.shape)
weights = np.array([0.7, 0.1, 0.1, 0.1])
mixed = mode_effective_weight(w0, bank, weights).data

# mixing the effective weights is not the same as mixing the updates
per_expert = [mode_effective_weight(w0, bank, np.eye(4)[i]).data for i in range(4)]
naive = sum(wi * p for wi, p in zip(weights, per_expert))
print("mix of updates vs mix of weights, max gap:", np.abs(mixed - naive).max().round(4))

# the update that enters the direction is the weighted sum of B_i A_i
delta = mixed_update(bank, Tensor(weights)).data
v = w0 + delta
print("recomposed by hand matches:",
      np.allclose(mixed, bank.m.data * v / np.linalg.norm(v, axis=0), atol=1e-12))

# %%
# one row of weights per example gives one effective matrix per example
batch_w = rng.dirichlet(np.ones(4), size=3)
print("per-example weights -> effective weights of shape", mode_effective_weight(w0, bank, batch_w).shape)
