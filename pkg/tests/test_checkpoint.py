import numpy as np
import pytest

from modelab.backbone import BackboneConfig
from modelab.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from modelab.synthdata import SynthConfig, generate
from modelab.training import (TrainConfig, build_model, frozen_digest, predict, snapshot,
                              train_joint)

BB = BackboneConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, d_in=4, n_tasks=2, seed=1)
CFG = TrainConfig(epochs=1, batch_size=16, rank=2, alpha=4.0, n_experts=3, seeds=(0,),
                  regime="joint_mode")


@pytest.fixture(scope="module")
def ds():
    return generate(SynthConfig(n_participants=80, n_tasks=2, seq_len=6, d_in=4,
                                snr=(0.5, 0.6), families=(0, 1), outlier_task=None))


def test_round_trip_is_bit_exact(ds, tmp_path):
    res = train_joint(CFG, ds, True, BB, keep_models=True)
    run = res.runs[0]
    model = run.extra["model"]
    path = save_checkpoint(tmp_path / "a.npz", run.state, BB, CFG, 0, True,
                           {"selected_epoch": run.selected_epoch}, frozen_digest(model))
    loaded, header = load_checkpoint(path)
    assert header["extra"]["selected_epoch"] == run.selected_epoch
    for k, v in snapshot(loaded).items():
        assert v.tobytes() == run.state[k].tobytes(), k
    idx = ds.indices("test")
    a, b = predict(model, ds, idx), predict(loaded, ds, idx)
    assert a.predictions.prob_positive.tobytes() == b.predictions.prob_positive.tobytes()
    assert a.routing.tobytes() == b.routing.tobytes()


def test_mismatched_parameters_rejected(tmp_path):
    model = build_model(BB, CFG, 0, use_experts=True)
    state = snapshot(model)
    state["stray"] = np.zeros(2)
    path = save_checkpoint(tmp_path / "b.npz", state, BB, CFG, 0, True)
    with pytest.raises(ValueError, match="mismatch"):
        load_checkpoint(path)


def test_frozen_hash_checked(tmp_path):
    model = build_model(BB, CFG, 0, use_experts=True)
    path = save_checkpoint(tmp_path / "c.npz", snapshot(model), BB, CFG, 0, True,
                           frozen_hash="0" * 64)
    with pytest.raises(ValueError, match="differs"):
        load_checkpoint(path)


def test_task_scope_restored(tmp_path):
    model = build_model(BB, CFG, 0, use_experts=False)
    path = save_checkpoint(tmp_path / "d.npz", snapshot(model), BB, CFG, 0, False, {"task": 1})
    loaded, _ = load_checkpoint(path)
    assert loaded.task_scope == {1}
    header, state = read_checkpoint(path)
    assert header["use_experts"] is False and set(state) == set(snapshot(model))
