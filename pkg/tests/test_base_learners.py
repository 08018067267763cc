import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_qp import base_learners as bl
from fewshot_qp.oracles import cs_svm_dual_objective, cs_svm_projected_gradient
from fewshot_qp.qp_core import DimensionMismatch, SolverConfig
from fewshot_qp.qp_grad import StaleFactorization

CONVERGED = SolverConfig(tolerance=1e-12, max_iterations=100)


def ortho_support(dim=4):
    return bl.SupportSet(np.eye(2, dim), np.array([0, 1]), 2)


def random_support(rng, way, shot, dim):
    return bl.SupportSet(rng.standard_normal((way * shot, dim)), np.repeat(np.arange(way), shot),
                         way)


def svm(c, cap=None):
    return bl.LearnerConfig("svm_cs", svm_c=c, qp_iteration_cap=cap)


# ---------------------------------------------------------------- gram

def test_gram_orthonormal_and_single_row():
    assert np.allclose(bl.gram_matrix(ortho_support()), np.eye(2))
    v = np.array([[3.0, 4.0]])
    assert np.array_equal(bl.gram_matrix(bl.SupportSet(v, [0], 1)), [[25.0]])


def test_gram_matches_double_loop():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((10, 16))
    naive = np.array([[sum(F[i, k] * F[j, k] for k in range(16)) for j in range(10)]
                      for i in range(10)])
    G = bl.gram_matrix(bl.SupportSet(F, np.arange(10) % 2, 2))
    assert np.max(np.abs(G - naive)) <= 1e-12


# ------------------------------------------------------------------ svm

def test_svm_qp_layout():
    rng = np.random.default_rng(1)
    s = random_support(rng, 3, 2, 5)
    prob = bl.svm_cs_dual_qp(s, 0.1)
    assert (prob.m, prob.p, prob.r) == (18, 18, 6)
    # class-major: q is -1 at (n, y_n)
    assert np.array_equal(np.flatnonzero(prob.q), [k * 6 + n for n, k in enumerate(s.labels)])
    assert np.allclose(prob.h[prob.q < 0], 0.1) and np.allclose(prob.h[prob.q == 0], 0.0)


def test_svm_orthonormal_c_one():
    r = bl.fit(ortho_support(), svm(1.0), CONVERGED)
    assert np.allclose(r.duals.alpha, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-8)


def test_svm_orthonormal_c_clipped():
    r = bl.fit(ortho_support(), svm(0.1), CONVERGED)
    assert np.allclose(r.duals.alpha, [[0.1, -0.1], [-0.1, 0.1]], atol=1e-8)


def test_svm_orthonormal_weights_and_scores():
    r = bl.fit(ortho_support(), svm(1.0), CONVERGED)
    w1 = 0.5 * (np.eye(4)[0] - np.eye(4)[1])
    assert np.allclose(r.weights.weights, [w1, -w1], atol=1e-8)
    s = r.scores(np.eye(4)[:1])
    assert s[0, 0] == pytest.approx(0.5, abs=1e-8) and s[0, 0] > s[0, 1]


def test_svm_three_way_matches_projected_gradient():
    rng = np.random.default_rng(2)
    s = random_support(rng, 3, 2, 8)
    r = bl.fit(s, svm(0.1), SolverConfig(tolerance=1e-10))
    gram = bl.gram_matrix(s) + bl.SVM_GRAM_SHIFT * np.eye(6)
    ref = cs_svm_projected_gradient(gram, s.labels, 3, 0.1)
    gap = cs_svm_dual_objective(r.duals.alpha, gram, s.labels) - \
        cs_svm_dual_objective(ref, gram, s.labels)
    assert abs(gap) <= 1e-6


def test_svm_dual_feasibility():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = random_support(rng, 5, 3, 12)
        a = bl.fit(s, svm(0.1), SolverConfig(tolerance=1e-10)).duals.alpha
        assert np.max(np.abs(a.sum(axis=1))) <= 1e-6
        own = a[np.arange(s.size), s.labels]
        assert own.min() >= -1e-8 and own.max() <= 0.1 + 1e-8
        other = a.copy()
        other[np.arange(s.size), s.labels] = -np.inf
        assert other.max() <= 1e-8


def test_svm_duplicate_points_with_different_labels():
    F = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    r = bl.fit(bl.SupportSet(F, [0, 1, 1], 2), svm(0.1))
    assert np.all(np.isfinite(r.weights.weights))


def test_degenerate_class_missing():
    with pytest.raises(bl.DegenerateClass):
        bl.svm_cs_dual_qp(bl.SupportSet(np.eye(2), [0, 0], 2), 0.1)
    with pytest.raises(bl.DegenerateClass):
        bl.class_means(bl.SupportSet(np.eye(2), [0, 0], 2))


# ---------------------------------------------------------------- ridge

def test_ridge_orthonormal():
    s = bl.SupportSet(np.eye(3, 5), [0, 1, 2], 3)
    r = bl.fit(s, bl.LearnerConfig("ridge", ridge_lambda=1.0))
    assert np.allclose(r.duals.alpha, 0.5 * np.eye(3), atol=1e-12)


def test_ridge_large_lambda():
    rng = np.random.default_rng(4)
    s = random_support(rng, 3, 2, 6)
    r = bl.fit(s, bl.LearnerConfig("ridge", ridge_lambda=1e6))
    assert np.allclose(r.duals.alpha * 1e6, s.one_hot(), atol=1e-4)
    sums = s.one_hot().T @ s.features
    assert np.allclose(r.weights.weights * 1e6, sums, rtol=1e-4, atol=1e-4)


def test_ridge_matches_linear_solve_and_cap_one():
    rng = np.random.default_rng(5)
    for _ in range(10):
        s = random_support(rng, 5, 3, 20)
        direct = np.linalg.solve(bl.gram_matrix(s) + 50.0 * np.eye(s.size), s.one_hot())
        for cap in (1, None):
            r = bl.fit(s, bl.LearnerConfig("ridge", qp_iteration_cap=cap))
            assert np.max(np.abs(r.duals.alpha - direct)) <= 1e-8


# -------------------------------------------------------------- weights

def test_dual_to_weights_examples():
    s = ortho_support()
    assert np.array_equal(bl.dual_to_weights(bl.DualVariables(np.zeros((2, 2))), s).weights,
                          np.zeros((2, 4)))
    a = np.zeros((2, 2))
    a[0, 0] = 1.0
    w = bl.dual_to_weights(bl.DualVariables(a), s).weights
    assert np.array_equal(w[0], np.eye(4)[0]) and not w[1].any()
    with pytest.raises(DimensionMismatch):
        bl.dual_to_weights(bl.DualVariables(np.zeros((3, 2))), s)


def test_dual_vector_round_trip():
    a = np.arange(6.0).reshape(3, 2)
    d = bl.DualVariables(a)
    assert np.array_equal(bl.DualVariables.from_qp(d.as_qp_vector(), 3, 2).alpha, a)


def test_representer_property():
    rng = np.random.default_rng(6)
    for kind in ("svm_cs", "ridge"):
        s = random_support(rng, 3, 2, 30)
        W = bl.fit(s, bl.LearnerConfig(kind)).weights.weights
        Q, _ = np.linalg.qr(s.features.T)
        assert np.max(np.abs(W - (W @ Q) @ Q.T)) <= 1e-8


# ------------------------------------------------------------------ ncm

def test_ncm_one_shot_prototype_and_self_score():
    rng = np.random.default_rng(7)
    s = random_support(rng, 4, 1, 6)
    r = bl.fit(s, bl.LearnerConfig("nearest_class_mean"))
    assert np.array_equal(r.weights.weights, s.features)
    assert r.duals is None and r.solution is None
    sc = r.scores(s.features[2:3])
    assert sc[0, 2] == 0.0 and np.all(np.delete(sc[0], 2) < 0)


def test_ncm_matches_brute_force():
    rng = np.random.default_rng(8)
    s = random_support(rng, 5, 5, 10)
    Q = rng.standard_normal((40, 10))
    pred = np.argmax(bl.fit(s, bl.LearnerConfig("nearest_class_mean")).scores(Q), axis=1)
    means = [s.features[s.labels == k].mean(axis=0) for k in range(5)]
    brute = [min(range(5), key=lambda k: np.sum((q - means[k]) ** 2)) for q in Q]
    assert np.array_equal(pred, brute)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_ncm_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    s = random_support(rng, 4, 3, 5)
    Q = rng.standard_normal((12, 5))
    a = np.argmax(bl.nearest_class_mean(s)(Q), axis=1)
    s2 = bl.SupportSet(scale * s.features, s.labels, 4)
    b = np.argmax(bl.nearest_class_mean(s2)(scale * Q), axis=1)
    assert np.array_equal(a, b)


# ------------------------------------------------------------------ fit

def test_fit_deterministic_and_learners_agree_on_easy_query():
    s = ortho_support()
    for cfg in (svm(0.1, 3), bl.LearnerConfig("ridge")):
        a, b = bl.fit(s, cfg), bl.fit(s, cfg)
        assert np.array_equal(a.weights.weights, b.weights.weights)
        assert np.argmax(a.scores(np.eye(4)[:1])) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        bl.LearnerConfig("logistic")
    with pytest.raises(ValueError):
        bl.LearnerConfig(svm_c=0.0)
    with pytest.raises(ValueError):
        bl.LearnerConfig(ridge_lambda=-1.0)
    with pytest.raises(ValueError):
        bl.LearnerConfig(qp_iteration_cap=0)


# ------------------------------------------------------------- backward

def _loss_of_features(F, labels, K, cfg, dW_probe):
    s = bl.SupportSet(F, labels, K)
    return float(np.sum(bl.fit(s, cfg, CONVERGED).weights.weights * dW_probe))


@pytest.mark.parametrize("kind", ["ridge", "svm_cs"])
def test_backward_to_support_matches_fd(kind):
    rng = np.random.default_rng(9)
    cfg = bl.LearnerConfig(kind, svm_c=0.1, ridge_lambda=1.0, qp_iteration_cap=None)
    F = rng.standard_normal((2, 5))
    labels = np.array([0, 1])
    probe = rng.standard_normal((2, 5))
    s = bl.SupportSet(F, labels, 2)
    grad = bl.backward_to_support(bl.fit(s, cfg, CONVERGED), probe, s)
    step = 1e-6
    for i in range(2):
        for j in range(5):
            E = np.zeros_like(F)
            E[i, j] = step
            fd = (_loss_of_features(F + E, labels, 2, cfg, probe)
                  - _loss_of_features(F - E, labels, 2, cfg, probe)) / (2 * step)
            assert abs(fd - grad[i, j]) <= 1e-4 * max(abs(fd), abs(grad[i, j]), 1e-4)


def test_backward_zero_and_stale():
    s = ortho_support()
    r = bl.fit(s, bl.LearnerConfig("ridge"))
    assert not bl.backward_to_support(r, np.zeros((2, 4)), s).any()
    with pytest.raises(StaleFactorization):
        bl.backward_to_support(bl.fit(s, bl.LearnerConfig("nearest_class_mean")),
                               np.zeros((2, 4)), s)


def test_prototype_backward_scatter():
    s = bl.SupportSet(np.zeros((4, 3)), [0, 0, 1, 1], 2)
    d = np.array([[2.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
    out = bl.prototype_backward(d, s)
    assert np.allclose(out, [[1, 0, 0], [1, 0, 0], [0, 2, 0], [0, 2, 0]])


@pytest.mark.parametrize("kind", ["ridge", "svm_cs", "nearest_class_mean"])
def test_score_backward_matches_fd_on_queries(kind):
    rng = np.random.default_rng(10)
    s = random_support(rng, 3, 2, 4)
    r = bl.fit(s, bl.LearnerConfig(kind, qp_iteration_cap=None), CONVERGED)
    Q = rng.standard_normal((5, 4))
    dS = rng.standard_normal((5, 3))
    _, dQ = r.score_backward(Q, dS)
    step = 1e-6
    E = rng.standard_normal(Q.shape)
    fd = (np.sum(r.scores(Q + step * E) * dS) - np.sum(r.scores(Q - step * E) * dS)) / (2 * step)
    assert fd == pytest.approx(np.sum(dQ * E), rel=1e-6)
