import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apigraph import tensor as T
from apigraph.errors import BadLabel, BadRate, IndexOutOfRange, NonScalarLoss
from apigraph.rng import SplitMix64
from helpers import max_rel_error

finite = st.floats(-20, 20, allow_nan=False)


def _p(rng, *shape):
    return T.parameter(rng.normal(int(np.prod(shape))).reshape(shape))


def test_primitive_values():
    assert np.allclose(T.softmax(T.Tensor([1.0, 1.0, 1.0])).data, 1 / 3)
    assert T.relu(T.Tensor([1.0, -1.0])).data.tolist() == [1.0, 0.0]
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), T.Tensor(m)).data, m)


def test_simple_gradients():
    x = T.parameter(3.0)
    assert T.grad(T.mul(x, x), [x])[0] == pytest.approx(6.0)
    x = T.parameter(-1.0)
    assert T.grad(T.relu(x), [x])[0] == 0.0


def test_non_scalar_loss():
    with pytest.raises(NonScalarLoss):
        T.backward(T.parameter([1.0, 2.0]))


def test_adam_first_step():
    p = T.parameter(np.zeros(1))
    T.Adam([p]).step([np.ones(1)])
    assert abs(p.data[0] + 0.001) <= 1e-9
    q = T.parameter(np.array([0.5]))
    T.Adam([q]).step([np.zeros(1)])
    assert q.data[0] == 0.5


def test_adam_elementwise_independence():
    a, b = T.parameter([0.1, -0.2]), T.parameter([[1.0]])
    opt = T.Adam([a, b])
    a1, b1 = T.parameter([0.1, -0.2]), T.parameter([[1.0]])
    opt_a, opt_b = T.Adam([a1]), T.Adam([b1])
    for g in ([0.3, -1.0], [2.0, 0.5]):
        ga, gb = np.array(g), np.array([[g[0] * 3]])
        opt.step([ga, gb])
        opt_a.step([ga])
        opt_b.step([gb])
    assert np.array_equal(a.data, a1.data) and np.array_equal(b.data, b1.data)


def test_cross_entropy_values():
    assert T.cross_entropy(T.Tensor([0.0, 0.0]), 0).item() == pytest.approx(np.log(2))
    assert T.cross_entropy(T.Tensor([10.0, -10.0]), 0).item() <= 1e-4
    with pytest.raises(BadLabel):
        T.cross_entropy(T.Tensor([0.0, 0.0]), 2)


def test_weighted_cross_entropy():
    logits = T.Tensor([[1.0, 0.0], [0.0, 2.0], [0.5, 0.5]])
    lp = logits.data - np.log(np.exp(logits.data).sum(1, keepdims=True))
    y = np.array([0, 1, 1])
    w = np.array([1.0, 3.0, 0.5])
    want = -(w * lp[np.arange(3), y]).sum() / w.sum()
    assert T.cross_entropy(logits, y, w).item() == pytest.approx(want)
    assert T.cross_entropy(logits, y, np.ones(3)).item() == pytest.approx(T.cross_entropy(logits, y).item())


@given(arrays(np.float64, (3, 4), elements=finite), st.lists(st.integers(0, 3), min_size=3, max_size=3))
@settings(max_examples=50, deadline=None)
def test_cross_entropy_nonnegative(logits, labels):
    assert T.cross_entropy(T.Tensor(logits), np.array(labels)).item() >= 0.0


@given(arrays(np.float64, (2, 5), elements=finite))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(x):
    assert np.allclose(T.softmax(T.Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-12)


def test_dropout():
    x = T.Tensor(np.ones(10_000))
    assert T.dropout(x, 0.0, SplitMix64(1), True) is x
    assert T.dropout(x, 0.9, SplitMix64(1), False) is x
    assert 0.9 <= T.dropout(x, 0.5, SplitMix64(7), True).data.mean() <= 1.1
    with pytest.raises(BadRate):
        T.dropout(x, 1.0, SplitMix64(1), True)


def test_conv1d_values():
    x = T.Tensor(np.array([[1.0], [2.0], [3.0]]))
    ident = T.Tensor(np.array([[[0.0], [1.0], [0.0]]]))
    assert T.conv1d(x, ident).data[:, 0].tolist() == [1.0, 2.0, 3.0]
    ones = T.Tensor(np.ones((1, 3, 1)))
    assert T.conv1d(T.Tensor(np.ones((3, 1))), ones).data[:, 0].tolist() == [2.0, 3.0, 2.0]
    assert not T.conv1d(T.Tensor(np.zeros((5, 2))), T.Tensor(np.ones((4, 3, 2)))).data.any()


def test_conv1d_matches_direct_sum():
    rng = SplitMix64(2)
    x = rng.normal(7 * 3).reshape(7, 3)
    k = rng.normal(4 * 5 * 3).reshape(4, 5, 3)
    xp = np.vstack([np.zeros((2, 3)), x, np.zeros((2, 3))])
    want = np.array([[np.sum(xp[t : t + 5] * k[o]) for o in range(4)] for t in range(7)])
    assert np.allclose(T.conv1d(T.Tensor(x), T.Tensor(k)).data, want, atol=1e-12)


def test_pooling_values():
    assert T.max_pool1d(T.Tensor([1.0, 3.0, 2.0, 0.0]), 2).data.tolist() == [3.0, 2.0]
    assert T.global_mean_pool_rows(T.Tensor([[1.0, 2.0], [3.0, 4.0]])).data.tolist() == [2.0, 3.0]
    assert T.global_max_pool(T.Tensor([[1.0, -2.0]])).data.tolist() == [1.0, -2.0]


def test_embedding_lookup():
    table = T.parameter(np.arange(12.0).reshape(4, 3))
    out = T.embedding_lookup(table, [2, 1])
    assert np.array_equal(out.data, table.data[[2, 1]])
    padded = T.embedding_lookup(table, [0, 3, 3])
    assert not padded.data[0].any()
    g = T.grad(T.sum(padded), [table])[0]
    assert not g[0].any() and g[3].tolist() == [2.0, 2.0, 2.0]
    with pytest.raises(IndexOutOfRange):
        T.embedding_lookup(table, [4])


GRAD_CASES = {
    "matmul_tanh": lambda r: (lambda a, b: T.sum(T.tanh(T.matmul(a, b))), (_p(r, 3, 4), _p(r, 4, 2))),
    "sigmoid_exp_log": lambda r: (lambda a: T.sum(T.log(T.add(T.exp(T.sigmoid(a)), 1.0))), (_p(r, 5),)),
    "div_concat": lambda r: (
        lambda a, b: T.sum(T.div(T.concat([a, b], 1), T.add(T.mul(T.concat([b, a], 1), T.concat([a, b], 1)), 2.0))),
        (_p(r, 3, 2), _p(r, 3, 2)),
    ),
    "log_softmax": lambda r: (lambda a: T.sum(T.mul(T.log_softmax(a), T.Tensor(np.arange(12.0).reshape(3, 4)))), (_p(r, 3, 4),)),
    "pairwise_distance": lambda r: (lambda z: T.sum(T.exp(T.neg(T.pairwise_distance(z)))), (_p(r, 4, 3),)),
    "conv1d": lambda r: (lambda x, k, b: T.sum(T.tanh(T.conv1d(x, k, b))), (_p(r, 2, 6, 3), _p(r, 4, 5, 3), _p(r, 4))),
    "max_pool1d": lambda r: (lambda x: T.sum(T.mul(T.max_pool1d(x, 2), T.max_pool1d(x, 2))), (_p(r, 8, 3),)),
    "global_max_pool": lambda r: (lambda x: T.sum(T.tanh(T.global_max_pool(x))), (_p(r, 5, 3),)),
    "embedding": lambda r: (lambda t: T.sum(T.tanh(T.embedding_lookup(t, [1, 3, 3, 0, 2]))), (_p(r, 4, 3),)),
    "dropout_off": lambda r: (lambda x: T.sum(T.tanh(T.dropout(x, 0.5, None, False))), (_p(r, 6),)),
    "cross_entropy": lambda r: (lambda z: T.cross_entropy(z, np.array([0, 1, 1, 0])), (_p(r, 4, 2),)),
    "bce": lambda r: (lambda z: T.bce(T.sigmoid(z), np.array([0, 1, 1, 0, 1])), (_p(r, 5),)),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck(name):
    fn, params = GRAD_CASES[name](SplitMix64(3).split(name))
    assert max_rel_error(lambda: fn(*params), params) <= 1e-4


def test_params_json_roundtrip():
    named = {"a": T.parameter(np.arange(6.0).reshape(2, 3)), "b": T.parameter(np.array([0.25]))}
    kind, back, meta = T.params_from_json(T.params_to_json("demo", named, {"k": 1}))
    assert kind == "demo" and meta == {"k": 1}
    assert all(np.array_equal(back[k].data, named[k].data) for k in named)
