"""
Routing, temperature and expert collapse
========================================

The router maps the adapter-free pooled hidden state to expert weights with
a temperature-scaled softmax. Without the load-balancing term, a sharp
router on a small corpus tends to pile its weight onto a few experts; the
KL penalty toward uniform keeps the mixture spread out.
"""

import math

import numpy as np

from modelab.autodiff import Tensor
from modelab.backbone import BackboneConfig
from modelab.routing import Router, route, routing_entropy, total_loss
from modelab.synthdata import SynthConfig, generate
from modelab.training import TrainConfig, train_joint

router = Router.create(d_model=8, n_experts=4, seed=np.random.default_rng(0), init_scale=1.0)
h = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
for t in (0.1, 1.0, 10.0):
    out = route(h, router, temperature=t)
    print(f"T={t:<4} mean entropy {routing_entropy(out.weights.data).mean():.3f}"
          f"  (ln E = {math.log(4):.3f})")

# a one-hot row pays lambda * ln E on top of the cross-entropy
one_hot = Tensor(np.eye(10)[[0]])
print("total loss for one-hot routing:", round(total_loss(Tensor(np.array(0.7)), one_hot, 0.01).item(), 5))

# %%
# A small collapse-prone setup: sharp temperature, small router init
data = generate(SynthConfig(n_participants=300, n_tasks=4, seq_len=12, d_in=8,
                            snr=(0.4, 0.4, 0.5, 0.5), families=(0, 0, 1, 1), outlier_task=None))
bb = BackboneConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32)
base = TrainConfig(epochs=3, rank=4, alpha=8.0, n_experts=6, temperature=0.02,
                   router_init_scale=0.02, seeds=(0,))
for lam in (0.0, 0.01):
    res = train_joint(TrainConfig(**{**base.to_dict(), "lambda_lb": lam}), data, True, bb)
    print(f"lambda={lam}: routing entropy per epoch",
          [round(e, 2) for e in res.runs[0].routing_entropy], f"(ln E = {math.log(6):.2f})")
