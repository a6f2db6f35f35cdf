import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelab.errors import ConfigurationError
from modelab.synthdata import (SynthConfig, generate, load_dataset, save_dataset, split,
                               split_sizes, task_transforms)

SMALL = dict(n_participants=200, seq_len=8)


@pytest.fixture(scope="module")
def default_ds():
    return generate(SynthConfig())


def test_default_marginals(default_ds):
    ds = default_ds
    assert len(ds.participant_label) == 1223 and ds.n_tasks == 10
    assert abs(ds.participant_label.mean() - 0.534) <= 0.02
    assert ds.features.shape == (12230, 32, 16)


def test_split_sizes_and_disjointness(default_ds):
    tr, dv, te = (set(default_ds.participants(s)) for s in ("train", "dev", "test"))
    assert (len(tr), len(dv), len(te)) == (979, 122, 122)
    assert not (tr & dv or tr & te or dv & te)
    train_idx, dev_idx, test_idx = split(default_ds)
    assert len(train_idx) + len(dev_idx) + len(test_idx) == len(default_ds)


def test_label_is_participant_level(default_ds):
    ds = default_ds
    np.testing.assert_array_equal(ds.label, ds.participant_label[ds.participant_id])


def test_generation_is_bitwise_deterministic():
    a, b = generate(SynthConfig(**SMALL)), generate(SynthConfig(**SMALL))
    assert a.features.tobytes() == b.features.tobytes() and a.fingerprint() == b.fingerprint()
    assert generate(SynthConfig(**SMALL, seed=1)).fingerprint() != a.fingerprint()


def test_partial_completion_keeps_test_complete():
    ds = generate(SynthConfig(**SMALL, completion_rate=0.95))
    assert len(ds) == ds.completion.sum() < 200 * 10
    assert ds.completion.any(axis=1).all()
    assert ds.completion[ds.participants("test")].all()


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 5000), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_split_sizes_largest_remainder(n, a, b):
    if a + b >= 1:
        a, b = a / 2, b / 2
    ratios = (a, b, 1 - a - b)
    sizes = split_sizes(n, ratios)
    assert sum(sizes) == n
    assert all(abs(s - n * r) < 1 for s, r in zip(sizes, ratios))


def test_transforms_share_direction_except_outlier():
    cfg = SynthConfig(d_in=8)
    rng = np.random.default_rng(0)
    s = rng.normal(size=8)
    s /= np.linalg.norm(s)
    m = task_transforms(cfg, s)
    for t in range(10):
        np.testing.assert_allclose(m[t] @ m[t].T, np.eye(8), atol=1e-12)
        if t != cfg.outlier_task:
            np.testing.assert_allclose(m[t] @ s, s, atol=1e-12)
    assert abs(m[cfg.outlier_task] @ s @ s) < 0.99
    # same family, same transform; different family, different transform
    np.testing.assert_array_equal(m[1], m[2])
    assert not np.allclose(m[1], m[4])


def _probe_accuracy(ds, task):
    """Fisher discriminant on time-pooled features, fit on train, scored on test."""
    x = ds.features.mean(axis=1)
    tr = ds.indices("train", task)
    te = ds.indices("test", task)
    y = ds.label
    mu1, mu0 = x[tr][y[tr] == 1].mean(0), x[tr][y[tr] == 0].mean(0)
    cov = np.cov(x[tr].T) + 1e-6 * np.eye(x.shape[1])
    w = np.linalg.solve(cov, mu1 - mu0)
    thresh = w @ (mu1 + mu0) / 2
    return np.mean((x[te] @ w > thresh) == y[te])


def test_higher_snr_is_more_separable():
    snr = [0.05] + [0.2] * 9
    for seed in range(3):
        ds = generate(SynthConfig(n_participants=1200, seq_len=16, snr=snr, seed=seed))
        assert _probe_accuracy(ds, 1) > _probe_accuracy(ds, 0)


def test_save_load_roundtrip(tmp_path):
    ds = generate(SynthConfig(**SMALL))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.fingerprint() == ds.fingerprint() and back.config == ds.config
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["config_hash"] == ds.config.digest()


def test_load_detects_tampering_and_absence(tmp_path):
    with pytest.raises(FileNotFoundError, match="generate"):
        load_dataset(tmp_path / "missing")
    ds = generate(SynthConfig(**SMALL))
    save_dataset(ds, tmp_path / "d")
    ds.features[0, 0, 0] += 1.0
    np.savez(tmp_path / "d" / "records.npz", participant_id=ds.participant_id,
             task_id=ds.task_id, label=ds.label, features=ds.features,
             participant_label=ds.participant_label, completion=ds.completion, split=ds.split)
    with pytest.raises(ValueError, match="hash"):
        load_dataset(tmp_path / "d")


@pytest.mark.parametrize("bad", [
    dict(p_positive=1.0), dict(snr=(0.1,) * 9), dict(snr=(0.0,) + (0.1,) * 9),
    dict(split_ratios=(0.5, 0.3, 0.3)), dict(completion_rate=0.0), dict(outlier_task=10),
    dict(n_participants=0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        SynthConfig(**bad)


def test_tiny_split_is_rejected():
    with pytest.raises(ConfigurationError):
        generate(SynthConfig(n_participants=5, seq_len=4))
