import numpy as np
import pytest

from modelab import autodiff as ad
from modelab.autodiff import Tensor
from modelab.backbone import (DORA, OFF, AdapterMode, Backbone, BackboneConfig, SequenceBatch,
                              adapted_sites)
from modelab.errors import ConfigurationError
from modelab.gradcheck import check_gradients

TINY = BackboneConfig(n_layers=2, d_model=8, n_heads=2, d_ff=12, max_seq_len=6, d_in=3, seed=5)


def make_batch(n=4, L=5, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return SequenceBatch(rng.normal(size=(n, L, d)), rng.integers(0, 10, n),
                         rng.integers(0, 2, n), np.arange(n))


def test_six_sites_per_layer():
    sites = adapted_sites(TINY)
    assert len(sites) == 12 and sites[0] == "layer0.attn.q" and sites[-1] == "layer1.ff.out"


def test_same_seed_same_frozen_weights():
    a, b = Backbone(TINY), Backbone(TINY)
    for k in a.frozen:
        np.testing.assert_array_equal(a.frozen[k].data, b.frozen[k].data)


def test_zero_update_identity_across_modes():
    batch = make_batch()
    plain = Backbone(TINY)
    ref = plain.forward(batch, OFF)[0].data
    single = Backbone(TINY)
    single.install_adapters(rank=2, alpha=4)
    np.testing.assert_allclose(single.forward(batch, DORA)[0].data, ref, atol=1e-9)
    experts = Backbone(TINY)
    experts.install_adapters(rank=2, alpha=4, n_experts=3)
    rng = np.random.default_rng(1)
    for _ in range(5):
        w = rng.dirichlet(np.ones(3), size=len(batch))
        np.testing.assert_allclose(experts.forward(batch, AdapterMode.mode(w))[0].data, ref,
                                   atol=1e-9)


def test_gradients_reach_adapters_and_head_only():
    bb = Backbone(TINY)
    bb.install_adapters(rank=2, alpha=4, n_experts=2)
    for adapter in bb.adapters.values():
        adapter.B.data[...] = 0.1
    batch = make_batch()
    logits, _ = bb.forward(batch, AdapterMode.mode(np.full((4, 2), 0.5)))
    ad.cross_entropy(logits, batch.label).backward()
    assert all(p.grad is not None and np.any(p.grad) for p in bb.trainable_parameters().values())
    assert all(p.grad is None for p in bb.frozen_parameters().values())


def test_backbone_gradient_matches_finite_differences():
    bb = Backbone(TINY)
    bb.install_adapters(rank=2, alpha=4, n_experts=2, seed=3)
    rng = np.random.default_rng(2)
    for adapter in bb.adapters.values():
        adapter.B.data[...] = rng.normal(0, 0.3, adapter.B.shape)
    batch = make_batch(n=3, L=4)
    logits_in = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    site = bb.adapters["layer0.attn.v"]
    params = [site.A, site.B, site.m, bb.adapters["layer1.ff.in"].B, bb.head["W"], logits_in]

    def loss():
        w = ad.softmax(logits_in, 1.0)
        return ad.cross_entropy(bb.forward(batch, AdapterMode.mode(w))[0], batch.label)

    assert check_gradients(loss, params) < 1e-5


def test_task_embedding_changes_output_per_task():
    cfg = BackboneConfig(**{**TINY.__dict__, "task_embedding": True})
    bb = Backbone(cfg)
    batch = make_batch()
    other = SequenceBatch(batch.features, (batch.task_id + 1) % 10, batch.label,
                          batch.participant_id)
    assert not np.allclose(bb.forward(batch)[0].data, bb.forward(other)[0].data)


def test_input_validation():
    bb = Backbone(TINY)
    with pytest.raises(ConfigurationError):
        bb.forward(make_batch(L=7))
    with pytest.raises(ConfigurationError):
        bb.forward(make_batch(), DORA)
    bb.install_adapters(rank=2, n_experts=3)
    with pytest.raises(ConfigurationError):
        bb.forward(make_batch(n=4), AdapterMode.mode(np.full((2, 3), 1 / 3)))
    with pytest.raises(ConfigurationError):
        BackboneConfig(d_model=10, n_heads=4)
