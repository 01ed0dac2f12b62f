import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdcrl import causal_core as cc
from tdcrl import nn_core as nn
from tdcrl.augment import DOMAIN_WORDS, StyleBasis
from tdcrl.encoder_io import SyntheticEncoder


def toy(ES=8, K=3, N=4, layers=3, seed=0, warm=True):
    rng = np.random.default_rng(seed)
    g = cc.InterventionNet.init(ES, layers, rng)
    C = cc.Classifier.init(ES, K, rng)
    if warm:
        for bn in g.norms:
            bn.running_mean = rng.normal(0, 0.1, ES)
            bn.running_var = rng.uniform(0.01, 0.05, ES)
            bn.gamma = rng.normal(1, 0.2, ES)
            bn.beta = rng.normal(0, 0.2, ES)
    Z = rng.normal(size=(N, ES))
    F = rng.normal(size=(K, N, ES))
    F /= np.linalg.norm(F, axis=-1, keepdims=True)
    return g, C, Z, F, rng


def oracle_forward(g, x):
    """Straight-line eval-mode pass, one scalar at a time."""
    h = list(x)
    for lin, bn in zip(g.linears, g.norms):
        out = []
        for o in range(lin.out_features):
            a = lin.bias[o]
            for j in range(lin.in_features):
                a += lin.weight[o, j] * h[j]
            a = a if a > 0 else 0.0
            a = (a - bn.running_mean[o]) / math.sqrt(bn.running_var[o] + bn.epsilon)
            out.append(bn.gamma[o] * a + bn.beta[o])
        h = out
    return np.array(h)


def test_dictionary_uses_first_words():
    rng = np.random.default_rng(0)
    basis = StyleBasis(rng.normal(size=(13, 5)), list(DOMAIN_WORDS))
    enc = SyntheticEncoder.from_seed(0, 3, 8, 5, basis.vectors)
    Z = cc.build_confounder_dictionary(enc, basis, 6)
    assert Z.words == ["sketch", "cartoon", "photo", "surrealism", "minimalist", "retro"]
    assert np.allclose(np.linalg.norm(Z.vectors, axis=1), 1, atol=1e-12)
    # class-agnostic prompt: zero class code
    assert np.allclose(Z.vectors[0], enc.style_map @ basis.vectors[0] / np.linalg.norm(enc.style_map @ basis.vectors[0]))
    assert cc.build_confounder_dictionary(enc, basis, 13).words == list(DOMAIN_WORDS)
    assert cc.build_confounder_dictionary(enc, basis, 1).N == 1
    with pytest.raises(ValueError):
        cc.build_confounder_dictionary(enc, basis, 14)
    F = cc.build_target_matrix(enc, basis, 6, 3)
    assert F.shape == (3, 6, 8)
    assert np.allclose(F[2, 4], enc.text_encode(2, basis.vectors[4]))


def test_net_shape_rules():
    g, *_ = toy()
    assert g.linears[0].in_features == 16 and g.depth == 3
    with pytest.raises(nn.DimensionError):
        cc.InterventionNet([nn.LinearLayer(np.zeros((4, 4)), np.zeros(4))], [nn.BatchNormLayer.init(4)])


def test_intervene_matches_scalar_oracle():
    g, C, Z, F, rng = toy()
    f, z = rng.normal(size=8), rng.normal(size=8)
    out = cc.intervene(g, f, z, "eval")
    assert np.max(np.abs(out - oracle_forward(g, np.concatenate([f, z])))) <= 1e-12


def test_intervene_eval_is_batch_independent():
    g, C, Z, F, rng = toy()
    f = rng.normal(size=(5, 8))
    z = rng.normal(size=(5, 8))
    batch = cc.intervene(g, f, z, "eval")
    alone = cc.intervene(g, f[2], z[2], "eval")
    assert np.max(np.abs(batch[2] - alone)) <= 1e-9


def test_intervene_zero_network():
    g, C, Z, F, rng = toy(warm=False)
    for lin, bn in zip(g.linears, g.norms):
        lin.weight[:] = 0
        bn.beta[:] = 0
    assert np.array_equal(cc.intervene(g, rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), "train"), np.zeros((3, 8)))


def test_intervene_dimension_error():
    g, *_ = toy()
    with pytest.raises(nn.DimensionError):
        cc.intervene(g, np.zeros(7), np.zeros(8))


def test_expected_intervention_cases():
    g, C, Z, F, rng = toy()
    f = rng.normal(size=8)
    assert np.allclose(cc.expected_intervention(g, f, Z[:1]), cc.intervene(g, f, Z[0]), atol=1e-15)
    same = np.repeat(Z[:1], 4, axis=0)
    assert np.allclose(cc.expected_intervention(g, f, same), cc.intervene(g, f, Z[0]), atol=1e-15)
    loop = sum(cc.intervene(g, f, Z[n]) for n in range(4)) / 4
    assert np.max(np.abs(cc.expected_intervention(g, f, Z) - loop)) <= 1e-12
    with pytest.raises(ValueError):
        cc.expected_intervention(g, f, np.zeros((0, 8)))


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(6)))
def test_expected_intervention_permutation_invariant(perm):
    g, C, Z, F, rng = toy(N=6)
    f = rng.normal(size=(3, 8))
    a = cc.expected_intervention(g, f, Z)
    b = cc.expected_intervention(g, f, Z[list(perm)])
    assert np.allclose(a, b, atol=1e-12)


def test_infonce_uniform_similarities():
    N, ES = 6, 10
    T = np.zeros((N, ES))
    T[:, 0] = 1.0
    G = np.zeros((N, ES))
    G[:, 1] = np.arange(1, N + 1)
    loss, _ = cc.infonce_terms(G, T, 0.1)
    assert abs(loss - 6 * math.log(6)) <= 1e-12
    assert abs(loss - 10.7506) <= 1e-4


def test_infonce_aligned_closed_form():
    t = np.array([1.0, 0.0, 0.0])
    T = np.stack([t, -t])
    loss, _ = cc.infonce_terms(T.copy(), T, 0.1)
    expected = 2 * math.log1p(math.exp(-20))
    assert abs(loss - expected) <= 1e-12
    assert abs(expected - 4.12e-9) <= 0.01e-9


def test_infonce_rejects_bad_temperature():
    with pytest.raises(ValueError):
        cc.infonce_terms(np.ones((2, 2)), np.ones((2, 2)), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2 ** 32 - 1), st.floats(0.05, 2.0))
def test_infonce_non_negative(N, seed, tau):
    rng = np.random.default_rng(seed)
    loss, _ = cc.infonce_terms(rng.normal(size=(N, 5)), rng.normal(size=(N, 5)), tau)
    assert loss >= 0


def _tangent_towards(G_row, t):
    g_hat = G_row / np.linalg.norm(G_row)
    t_hat = t / np.linalg.norm(t)
    return t_hat - (t_hat @ g_hat) * g_hat


def test_tangent_move_raises_positive_similarity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        G, T = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        n = rng.integers(4)
        before = cc.cosine_matrix(G, T)[0][n, n]
        G[n] += 1e-6 * _tangent_towards(G[n], T[n])
        assert cc.cosine_matrix(G, T)[0][n, n] > before


def test_tangent_move_decreases_loss_with_orthogonal_negatives():
    # negatives orthogonal to the plane of G[n] and its positive keep their
    # similarity fixed to first order, so only the positive logit moves
    rng = np.random.default_rng(2)
    for _ in range(50):
        N, ES = 4, 8
        T = np.zeros((N, ES))
        T[np.arange(N), np.arange(N)] = 1.0
        n = rng.integers(N)
        G = rng.normal(size=(N, ES))
        G[n, :N] = 0.0
        G[n, n] = rng.normal()
        base, grad = cc.infonce_terms(G, T, 0.1)
        d = _tangent_towards(G[n], T[n])
        assert grad[n] @ d < 0
        G[n] += 1e-6 * d
        assert cc.infonce_terms(G, T, 0.1)[0] < base


def test_tangent_move_can_raise_loss_when_negatives_are_close():
    # a correlated negative gains similarity faster than the positive
    t1 = np.array([1.0, 0.0, 0.0])
    t2 = np.array([np.cos(0.3), np.sin(0.3), 0.0])
    G = np.array([[np.cos(-0.5), np.sin(-0.5), 0.0], [0.0, 1.0, 0.0]])
    T = np.stack([t1, t2])
    base, _ = cc.infonce_terms(G, T, 0.1)
    G[0] += 1e-6 * _tangent_towards(G[0], t1)
    assert cc.infonce_terms(G, T, 0.1)[0] > base


def test_infonce_gradient_finite_difference():
    rng = np.random.default_rng(2)
    G, T = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
    p = {"G": G}
    fn = lambda: (float(cc.infonce_terms(p["G"], T, 0.1)[0].sum()), {"G": cc.infonce_terms(p["G"], T, 0.1)[1]})
    assert nn.grad_check(p, fn, eps=1e-5) <= 1e-5


def l2_oracle(G, T):
    total = 0.0
    for n in range(G.shape[0]):
        for e in range(G.shape[1]):
            total += (G[n, e] - T[n, e]) ** 2
    return total / G.shape[0]


def test_l2_loss_cases():
    g, C, Z, F, rng = toy()
    f = rng.normal(size=8)
    out = cc.intervened_outputs(g, f, Z)[0]
    T = out[None].copy()
    assert cc.l2_intervention_loss(g, f, 0, Z, T)[0] == 0.0
    loss, _ = cc.l2_terms(np.array([[3.0, 0.0]]), np.array([[0.0, 4.0]]))
    assert loss == 25.0
    assert abs(cc.l2_intervention_loss(g, f, 1, Z, F)[0] - l2_oracle(out, F[1])) <= 1e-12


def test_classify():
    g, C, Z, F, rng = toy()
    C.layer.weight[:] = 0
    C.layer.bias[:] = [1.0, -2.0, 0.5]
    assert np.array_equal(cc.classify(C, rng.normal(size=8)), [1.0, -2.0, 0.5])
    C1 = cc.Classifier.init(8, 1, rng)
    assert cc.classify(C1, rng.normal(size=8)).shape == (1,)
    C2 = cc.Classifier.init(8, 3, rng)
    x = rng.normal(size=8)
    loop = [sum(C2.W[k, j] * x[j] for j in range(8)) + C2.b[k] for k in range(3)]
    assert np.max(np.abs(cc.classify(C2, x) - loop)) <= 1e-12
    with pytest.raises(nn.DimensionError):
        cc.classify(C2, np.zeros(5))


def test_ce_loss_cases():
    g, C, Z, F, rng = toy(K=7)
    C.layer.weight[:] = 0
    C.layer.bias[:] = 0
    f = rng.normal(size=8)
    assert abs(cc.ce_loss(C, g, f, 3, Z)[0] - math.log(7)) <= 1e-12
    C.layer.bias[3] = 800.0
    assert cc.ce_loss(C, g, f, 3, Z)[0] < 1e-300
    with pytest.raises(ValueError):
        cc.ce_loss(C, g, f, 7, Z)


def test_ce_loss_matches_composed_oracle():
    g, C, Z, F, rng = toy()
    f = rng.normal(size=8)
    feat = sum(oracle_forward(g, np.concatenate([f, Z[n]])) for n in range(4)) / 4
    logits = C.W @ feat + C.b
    expected = -(logits[2] - math.log(sum(math.exp(v) for v in logits)))
    assert abs(cc.ce_loss(C, g, f, 2, Z)[0] - expected) <= 1e-10


def test_ce_loss_decreases_with_true_logit():
    g, C, Z, F, rng = toy()
    f = rng.normal(size=8)
    prev = cc.ce_loss(C, g, f, 1, Z)[0]
    for _ in range(5):
        C.layer.bias[1] += 0.5
        cur = cc.ce_loss(C, g, f, 1, Z)[0]
        assert cur < prev
        prev = cur


@pytest.mark.parametrize("kind", ["infonce", "l2"])
@pytest.mark.parametrize("mode", ["eval", "train"])
def test_objective_gradients(kind, mode):
    g, C, Z, F, rng = toy(ES=6, K=3, N=3)
    f = rng.normal(size=(4, 6))
    y = np.array([0, 2, 1, 2])
    params = {**g.params(), **C.params()}

    def fn():
        r = cc.objective(g, C, f, y, Z, F, tau=0.1, lam=3.0, mode=mode, loss_g_kind=kind)
        return r.total, r.grads

    assert nn.grad_check(params, fn, eps=1e-5) <= 1e-5


def test_single_sample_loss_gradients():
    g, C, Z, F, rng = toy(ES=5, K=2, N=2, layers=2)
    f = rng.normal(size=5)
    for fn in (lambda: cc.infonce_loss(g, f, 1, Z, F), lambda: cc.l2_intervention_loss(g, f, 0, Z, F)):
        assert nn.grad_check(g.params(), fn, eps=1e-6) <= 1e-5
    params = {**g.params(), **C.params()}
    assert nn.grad_check(params, lambda: cc.ce_loss(C, g, f, 1, Z), eps=1e-6) <= 1e-5


def test_objective_validation():
    g, C, Z, F, rng = toy()
    with pytest.raises(ValueError):
        cc.objective(g, C, rng.normal(size=(2, 8)), [0, 5], Z, F)
    with pytest.raises(ValueError):
        cc.objective(g, C, rng.normal(size=(2, 8)), [0, 1], Z, None, lam=1.0)
    with pytest.raises(nn.DimensionError):
        cc.objective(g, C, rng.normal(size=(2, 8)), [0, 1], Z, F[:, :2])
    r = cc.objective(g, C, rng.normal(size=(2, 8)), [0, 1], Z, None, lam=0.0)
    assert r.loss_g == 0.0 and r.total == r.loss_c
