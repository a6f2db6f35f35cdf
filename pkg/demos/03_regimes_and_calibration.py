"""
Training regimes and calibration
================================

Separate models per task, one joint DoRA model, and a joint mixture of DoRA
experts are trained on the same small synthetic corpus, then scored for
accuracy, calibration and selective prediction.
"""

import numpy as np

from modelab.backbone import BackboneConfig
from modelab.calibration import activation_heatmap, curve_slope, evaluate
from modelab.synthdata import SynthConfig, generate
from modelab.training import TrainConfig, train

data = generate(SynthConfig(n_participants=800, n_tasks=4, seq_len=16, d_in=8,
                            snr=(0.3, 0.3, 0.35, 0.35), families=(0, 0, 1, 1), outlier_task=3))
print("records:", len(data.task_id), " participants per split:",
      {s: len(np.unique(data.participant_id[data.indices(s)])) for s in ("train", "dev", "test")})

bb = BackboneConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32)
base = dict(epochs=4, rank=4, alpha=8.0, n_experts=4, seeds=(0, 1))

results = {r: train(TrainConfig(regime=r, **base), data, bb) for r in ("separate", "joint", "joint_mode")}
for name, res in results.items():
    mean, se = res.average_accuracy()
    print(f"{name:>11}: accuracy {mean:.3f} +/- {se:.3f}")

# %%
# Calibration and selective prediction for seed 0 of each regime
for name, res in results.items():
    rep = evaluate(res.runs[0].test.predictions)
    m = rep.metrics()
    print(f"{name:>11}: " + " ".join(f"{k} {v:.3f}" for k, v in m.items()),
          f"| rejection slope {curve_slope(rep.rejection_curve):.3f}")

# %%
# Which experts each task uses under learned routing
run = results["joint_mode"].runs[0]
heat, _ = activation_heatmap(run.test.predictions.task_id, run.test.routing, data.n_tasks)
print(np.round(heat, 2))
