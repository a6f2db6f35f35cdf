import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelab import autodiff as ad
from modelab.autodiff import Tensor
from modelab.errors import DimensionError, DomainError, SingularityError
from modelab.gradcheck import check_gradients


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def test_matmul_identity_and_hand_arithmetic():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradient_3x4_by_4x2():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    c = Tensor(rng.normal(size=(3, 2)))
    err = check_gradients(lambda: ((a @ b) * c).sum(), [a, b])
    assert err < 1e-6


def test_softmax_closed_forms():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ad.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3],
                               atol=1e-15)
    assert ad.softmax(Tensor([3.0, 1.0, 0.0]), temperature=1e-4).data[0] > 1 - 1e-10


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(t):
    with pytest.raises(DomainError):
        ad.softmax(Tensor([1.0, 2.0]), temperature=t)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    s = ad.softmax(Tensor(xs)).data
    assert abs(s.sum() - 1.0) < 1e-12


def test_softmax_entropy_nondecreasing_in_temperature():
    rng = np.random.default_rng(1)
    grid = np.geomspace(0.05, 50, 40)
    for _ in range(20):
        x = Tensor(rng.normal(size=6) * 3)
        ent = []
        for t in grid:
            p = ad.softmax(x, t).data
            ent.append(-np.sum(p * np.log(np.where(p > 0, p, 1.0))))
        assert np.all(np.diff(ent) >= -1e-12)


def test_column_norm_examples():
    assert ad.column_norm(Tensor([[3.0], [4.0]])).data.tolist() == [[5.0]]
    assert ad.column_norm(Tensor(np.eye(2))).data.tolist() == [[1.0, 1.0]]
    w = np.random.default_rng(2).normal(size=(5, 3))
    np.testing.assert_array_equal(ad.column_norm(Tensor(w)).data,
                                  np.sqrt((w ** 2).sum(axis=0))[None, :])


def test_cross_entropy_values():
    assert ad.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert ad.cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    x = rand(rng, 6, 3)
    y = rng.integers(0, 3, 6)
    assert check_gradients(lambda: ad.cross_entropy(x, y), [x]) < 1e-6


def test_kl_uniform_values():
    assert ad.kl_uniform(Tensor(np.full((3, 4), 0.25))).item() == pytest.approx(0.0, abs=1e-15)
    assert ad.kl_uniform(Tensor([[1.0, 0.0, 0.0, 0.0]])).item() == pytest.approx(math.log(4), abs=1e-15)
    with pytest.raises(DomainError):
        ad.kl_uniform(Tensor([[0.5, 0.6]]))


def test_kl_uniform_matches_summation_oracle():
    rng = np.random.default_rng(4)
    w = rng.dirichlet(np.ones(5), size=7)
    oracle = sum(sum(p * math.log(p * 5) for p in row if p > 0) for row in w) / 7
    assert abs(ad.kl_uniform(Tensor(w)).item() - oracle) < 1e-12


def _instances(rng, n=20):
    for _ in range(n):
        yield np.random.default_rng(rng.integers(2 ** 32))


PRIMITIVES = {
    "add_broadcast": (lambda r: [rand(r, 3, 4), rand(r, 4)], lambda a, b: ((a + b) ** 2).sum()),
    "mul": (lambda r: [rand(r, 3, 4), rand(r, 3, 4)], lambda a, b: (a * b).sum()),
    "div": (lambda r: [rand(r, 3, 2), rand(r, 3, 2, lo=0.5, hi=2.0)], lambda a, b: (a / b).sum()),
    "scale_sub": (lambda r: [rand(r, 4)], lambda a: ((ad.scale(a, 1.7) - a * a) ** 2).sum()),
    "exp_log": (lambda r: [rand(r, 5)], lambda a: ad.log(ad.exp(a) + 1.0).sum()),
    "sqrt": (lambda r: [rand(r, 5, lo=0.3, hi=2.0)], lambda a: (ad.sqrt(a) * a).sum()),
    "tanh_gelu": (lambda r: [rand(r, 2, 5)], lambda a: (ad.gelu(a) * ad.tanh(a)).sum()),
    "relu": (lambda r: [rand(r, 2, 5)], lambda a: (ad.relu(a) ** 2).sum()),
    "batched_matmul": (lambda r: [rand(r, 2, 3, 4), rand(r, 2, 4, 2)], lambda a, b: ((a @ b) ** 2).sum()),
    "softmax_T": (lambda r: [rand(r, 3, 4)],
                  lambda a: (ad.softmax(a, 0.7) * Tensor(np.arange(12.0).reshape(3, 4))).sum()),
    "log_softmax": (lambda r: [rand(r, 3, 4)], lambda a: (ad.log_softmax(a) ** 2).sum()),
    "layer_norm": (lambda r: [rand(r, 2, 3, 5), rand(r, 5), rand(r, 5)],
                   lambda x, g, b: (ad.layer_norm(x, g, b) * Tensor(np.linspace(-1, 1, 30).reshape(2, 3, 5))).sum()),
    "mean_pool": (lambda r: [rand(r, 2, 4, 3)], lambda x: (ad.mean_pool(x) ** 2).sum()),
    "column_norm": (lambda r: [rand(r, 4, 3)], lambda w: (ad.column_norm(w) ** 2 + ad.column_norm(w)).sum()),
    "frobenius_norm": (lambda r: [rand(r, 2, 4, 3)], lambda w: ad.frobenius_norm(w).sum()),
    "magnitude_direction": (lambda r: [rand(r, 2, 4, 3), rand(r, 1, 3)],
                            lambda v, m: (ad.magnitude_direction(v, m) * Tensor(np.arange(24.0).reshape(2, 4, 3))).sum()),
    "reshape_transpose": (lambda r: [rand(r, 2, 3, 4)],
                          lambda x: ((ad.transpose(ad.reshape(x, (6, 4)), (1, 0)) @ Tensor(np.ones((6, 2)))) ** 2).sum()),
    "kl_uniform_softmax": (lambda r: [rand(r, 4, 5)], lambda x: ad.kl_uniform(ad.softmax(x, 0.8))),
    "cross_entropy": (lambda r: [rand(r, 5, 2)], lambda x: ad.cross_entropy(x, [0, 1, 1, 0, 1])),
    "take_rows_stack": (lambda r: [rand(r, 4, 3)],
                        lambda x: (ad.stack([ad.take_rows(x, np.array([0, 2, 2])),
                                              ad.take_rows(x, np.array([1, 1, 3]))]) ** 2).sum()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_on_20_instances(name):
    make, f = PRIMITIVES[name]
    worst = 0.0
    for r in _instances(np.random.default_rng(zlib.crc32(name.encode()))):
        inputs = make(r)
        worst = max(worst, check_gradients(lambda: f(*inputs), inputs))
    assert worst < 1e-5, f"{name}: {worst}"


def test_backward_through_shared_subgraph_counts_each_path():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    assert x.grad.tolist() == [8.0]


def test_non_finite_results_raise():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        ad.exp(Tensor([1000.0]))


def test_division_by_zero_raises():
    with pytest.raises(SingularityError):
        Tensor([1.0]) / Tensor([0.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        out = ad.softmax(a @ a.T, 0.5).sum(axis=0)
        (out * out).sum().backward()
        return out.data.tobytes(), a.grad.tobytes()

    assert run() == run()
