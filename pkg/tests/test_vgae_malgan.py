import math

import numpy as np
import pytest

from apigraph import gnn
from apigraph import tensor as T
from apigraph.errors import ShapeMismatch
from apigraph.pipeline import merge_config, attacker_view
from apigraph.rng import SplitMix64
from apigraph.vgae_malgan import (
    AttackConfig,
    GnnDetector,
    Graph,
    THRESHOLD,
    constrain,
    decode,
    encode,
    featurize,
    generate_adversarial,
    generate_one,
    generator_loss,
    init_generator,
    inject_benign_noise,
    kl_divergence,
    recon_loss,
    relaxed_edges,
    retrain_defense,
    sample_latent,
    sd_loss,
    train_attack,
    validate_sample,
)
from helpers import max_rel_error, random_graph


def _g(app_id, nodes, edges):
    nodes = np.asarray(nodes)
    pos = {v: i for i, v in enumerate(nodes.tolist())}
    A = np.zeros((len(nodes), len(nodes)), dtype=np.int8)
    for u, v in edges:
        A[pos[u], pos[v]] = A[pos[v], pos[u]] = 1
    return Graph(app_id, nodes, A)


@pytest.fixture(scope="module")
def view(small_prep):
    return attacker_view(small_prep, merge_config({}))


def test_inject_noise_full_and_ceiling():
    mal = _g("m", [1, 2, 3], [(1, 2)])
    benign = _g("b", list(range(10, 16)), [(10, 11), (11, 12), (12, 13), (13, 14), (14, 15), (10, 15), (10, 12), (11, 13), (12, 14), (13, 15)])
    full, a_mal = inject_benign_noise(mal, benign, 1.0, SplitMix64(1))
    assert full.edges() == mal.edges() | benign.edges()
    half, _ = inject_benign_noise(mal, benign, 0.5, SplitMix64(1))
    assert len(half.edges() - mal.edges()) == 5
    assert mal.edges() <= half.edges()
    lifted = Graph("m", full.nodes, a_mal)
    assert lifted.edges() == mal.edges()


def test_encode_zero_weights_and_isolated_rows():
    gen = init_generator(0)
    for w in gen.params():
        w.data[:] = 0.0
    X = np.ones((3, 5))
    A = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    mu, logvar = encode(gen, X, A)
    assert not mu.data.any() and not logvar.data.any()
    gen = init_generator(1)
    mu, _ = encode(gen, SplitMix64(2).normal(15).reshape(3, 5), A)
    assert not mu.data[2].any()
    with pytest.raises(ShapeMismatch):
        encode(gen, X, np.zeros((2, 2)))


def test_sample_latent():
    mu = T.Tensor(np.full((2, 3), 0.7))
    z = sample_latent(mu, T.Tensor(np.full((2, 3), -1e6)), SplitMix64(1))
    assert np.allclose(z.data, mu.data, atol=0.05)
    a = sample_latent(mu, T.Tensor(np.zeros((2, 3))), SplitMix64(4))
    b = sample_latent(mu, T.Tensor(np.zeros((2, 3))), SplitMix64(4))
    assert np.array_equal(a.data, b.data)
    big = sample_latent(T.Tensor(np.zeros((10_000, 16))), T.Tensor(np.zeros((10_000, 16))), SplitMix64(9))
    assert np.all(np.abs(big.data.mean(axis=0)) <= 0.05)


def test_decode_threshold():
    def pair(d):
        return T.Tensor(np.array([[0.0, 0.0], [d, 0.0]]))

    P, hard = decode(pair(0.0))
    assert P.data[0, 1] == 1.0 and hard[0, 1] == 1 and hard[0, 0] == 0
    P, hard = decode(pair(0.01))
    assert P.data[0, 1] == pytest.approx(0.99005, abs=1e-5) and hard[0, 1] == 1
    P, hard = decode(pair(0.05))
    assert P.data[0, 1] == pytest.approx(0.95123, abs=1e-5) and hard[0, 1] == 0


def test_relaxed_edges_calibration():
    d = -math.log(THRESHOLD)
    R = relaxed_edges(T.Tensor(np.array([[0.0], [d]])))
    assert R.data[0, 1] == pytest.approx(0.5)


def test_constrain():
    a = np.array([[0, 1], [1, 0]])
    assert np.array_equal(constrain(a, np.zeros((2, 2)), a), a)
    assert np.array_equal(constrain(a, a, np.zeros((2, 2))), a)
    with pytest.raises(Exception):
        constrain(a, np.zeros((3, 3)), a)


def test_kl_values():
    assert kl_divergence(T.Tensor(np.zeros((1, 1))), T.Tensor(np.zeros((1, 1)))).item() == 0.0
    assert kl_divergence(T.Tensor(np.ones((1, 1))), T.Tensor(np.zeros((1, 1)))).item() == pytest.approx(0.5)


def test_recon_loss_perfect():
    A = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
    assert recon_loss(T.Tensor(A), A).item() <= 1e-10


def test_sd_loss_half_and_perfect():
    sd = gnn.init_gnn("sage", 0)
    for w in sd.params():
        w.data[:] = 0.0
    g = gnn.GraphData("a", np.arange(2), np.array([[0, 1], [1, 0]]), np.ones((2, 5)))
    assert sd_loss(sd, [g], [g], [1]).item() == pytest.approx(2 * math.log(2), abs=1e-4)
    sd.head_b.data[:] = [50.0, -50.0]
    benign_only = sd_loss(sd, [g], [g], [0]).item()
    assert benign_only <= 1e-10


def test_sd_loss_gradcheck(view):
    sd = gnn.init_gnn("sage", 3)
    benign = [featurize(b, view.table) for b in view.benign[:4]]
    adv = [featurize(m, view.table) for m in view.malware[:4]]
    labels = [1, 0, 1, 1]
    assert max_rel_error(lambda: sd_loss(sd, benign, adv, labels), sd.params()) <= 1e-4


def test_generator_loss_gradcheck(view):
    gen = init_generator(5, *_scaling(view))
    sd = gnn.init_gnn("sage", 6)
    mal, donor = view.malware[0], view.benign[0]

    def loss():
        out = generate_one(gen, mal, donor, view, 0.5, SplitMix64(11))
        return generator_loss(out, sd, True)

    assert max_rel_error(loss, gen.params()) <= 1e-4


def _scaling(view):
    x = np.concatenate([featurize(g, view.table).x for g in view.benign])
    return x.mean(axis=0), np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)


def test_kl_monte_carlo():
    rng = SplitMix64(21)
    for k in range(5):
        mu, lv = rng.normal(1)[0], rng.uniform(1)[0] * 2 - 1
        closed = kl_divergence(T.Tensor([[mu]]), T.Tensor([[lv]])).item()
        z = mu + math.exp(lv / 2) * rng.split(k).normal(100_000)
        mc = np.mean(-0.5 * lv - 0.5 * ((z - mu) ** 2) / math.exp(lv) + 0.5 * z**2)
        assert abs(closed - mc) <= 0.01


def test_generated_samples_preserve_semantics(view, small_prep):
    gen = init_generator(2, *_scaling(view))
    samples = generate_adversarial(gen, view.malware, view.benign, view, seed=3)
    for s, m in zip(samples, view.malware):
        assert validate_sample(s, m, view.global_graph)
        assert s.n >= m.n


def test_validator_rejects_broken_samples(view):
    gen = init_generator(2, *_scaling(view))
    mal = view.malware[0]
    s = generate_adversarial(gen, [mal], view.benign, view, seed=3)[0]
    dropped = s.adj.copy()
    r, c = np.nonzero(np.triu(s.mal_adj, 1))
    dropped[r[0], c[0]] = dropped[c[0], r[0]] = 0
    s.adj = dropped
    assert not validate_sample(s, mal, view.global_graph)


def test_train_attack_deterministic(small_prep, view):
    det = GnnDetector(gnn.train_gnn(small_prep.train_data, small_prep.y_train, "sage", 5, 0), small_prep.table)
    cfg = AttackConfig(max_epochs=2, patience=2, sd_steps=2, seed=4)
    a = train_attack(det, view, cfg)
    b = train_attack(det, view, cfg)
    assert a.history == b.history
    assert len(a.history) == 2 and 0 <= a.best_epoch < 2


def test_retrain_zero_samples_reproduces_baseline(small_prep):
    base = gnn.train_gnn(small_prep.train_data, small_prep.y_train, "sage", 3, 5)
    again = retrain_defense(small_prep.train_data, small_prep.y_train, [], small_prep.table, "sage", 3, 5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(base.params(), again.params()))
