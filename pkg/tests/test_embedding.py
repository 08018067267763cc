import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_qp import embedding as emb

SPECS = [
    emb.EmbeddingSpec("identity", 5, 5),
    emb.EmbeddingSpec("linear", 5, 3),
    emb.EmbeddingSpec("mlp", 5, 3, (7, 4), "leaky_relu"),
    emb.EmbeddingSpec("mlp", 5, 3, (6,), "relu"),
]


def naive_forward(spec, params, x):
    out = []
    for row in x:
        h = list(row)
        for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
            W, b = params[f"W{i}"], params[f"b{i}"]
            h = [sum(W[o, j] * h[j] for j in range(fan_in)) + b[o] for o in range(fan_out)]
            if i < len(spec.layer_dims()) - 1:
                slope = 0.1 if spec.activation == "leaky_relu" else 0.0
                h = [v if v > 0 else slope * v for v in h]
        out.append(h)
    return np.array(out)


def test_identity_and_unit_linear_are_passthrough():
    x = np.random.default_rng(0).standard_normal((4, 5))
    f, _ = emb.forward(SPECS[0], {}, x)
    assert np.array_equal(f, x)
    spec = emb.EmbeddingSpec("linear", 5, 5)
    f, _ = emb.forward(spec, {"W0": np.eye(5), "b0": np.zeros(5)}, x)
    assert np.array_equal(f, x)


def test_mlp_matches_naive_forward():
    rng = np.random.default_rng(1)
    spec = SPECS[2]
    params = emb.init_params(spec, rng)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    x = rng.standard_normal((6, 5))
    f, _ = emb.forward(spec, params, x)
    assert np.max(np.abs(f - naive_forward(spec, params, x))) <= 1e-12


def test_identity_vjp():
    g = np.random.default_rng(2).standard_normal((3, 5))
    _, tape = emb.forward(SPECS[0], {}, np.zeros((3, 5)))
    grads, dx = emb.vjp(tape, g)
    assert grads == {} and np.array_equal(dx, g)


def test_linear_vjp_closed_form():
    rng = np.random.default_rng(3)
    spec = SPECS[1]
    params = emb.init_params(spec, rng)
    x, g = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
    _, tape = emb.forward(spec, params, x)
    grads, dx = emb.vjp(tape, g)
    assert grads["W0"].shape == (3, 5)
    assert np.allclose(grads["W0"], g.T @ x) and np.allclose(dx, g @ params["W0"])
    assert np.allclose(grads["b0"], g.sum(axis=0))


@pytest.mark.parametrize("spec", SPECS[1:], ids=lambda s: f"{s.kind}-{s.activation}")
def test_vjp_matches_central_differences(spec):
    rng = np.random.default_rng(4)
    params = emb.init_params(spec, rng)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    x = rng.standard_normal((5, 5))
    g = rng.standard_normal((5, 3))
    _, tape = emb.forward(spec, params, x)
    grads, dx = emb.vjp(tape, g)
    step = 1e-5

    def loss(p, inp):
        return float(np.sum(emb.forward(spec, p, inp)[0] * g))

    for name, value in params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            hi = {k: v.copy() for k, v in params.items()}
            lo = {k: v.copy() for k, v in params.items()}
            hi[name][idx] += step
            lo[name][idx] -= step
            fd[idx] = (loss(hi, x) - loss(lo, x)) / (2 * step)
        assert np.linalg.norm(fd - grads[name]) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)
    fdx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = step
        fdx[idx] = (loss(params, x + e) - loss(params, x - e)) / (2 * step)
    assert np.linalg.norm(fdx - dx) <= 1e-5 * np.linalg.norm(fdx)


def test_vjp_is_linear():
    rng = np.random.default_rng(5)
    spec = SPECS[2]
    params = emb.init_params(spec, rng)
    _, tape = emb.forward(spec, params, rng.standard_normal((4, 5)))
    u, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    a, b, c = emb.vjp(tape, u), emb.vjp(tape, v), emb.vjp(tape, 2 * u + v)
    for k in params:
        assert np.allclose(c[0][k], 2 * a[0][k] + b[0][k], atol=1e-12)


def test_leaky_gradient_at_zero_takes_negative_branch():
    spec = emb.EmbeddingSpec("mlp", 1, 1, (1,), "leaky_relu")
    params = {"W0": np.ones((1, 1)), "b0": np.zeros(1), "W1": np.ones((1, 1)), "b1": np.zeros(1)}
    _, tape = emb.forward(spec, params, np.zeros((1, 1)))
    _, dx = emb.vjp(tape, np.ones((1, 1)))
    assert dx[0, 0] == pytest.approx(0.1)


def test_stale_tape_and_errors():
    spec = SPECS[1]
    params = emb.init_params(spec, np.random.default_rng(6))
    _, tape = emb.forward(spec, params, np.ones((2, 5)))
    emb.vjp(tape, np.ones((2, 3)), consume=True)
    with pytest.raises(emb.StaleTape):
        emb.vjp(tape, np.ones((2, 3)))
    with pytest.raises(emb.ShapeMismatch):
        emb.forward(spec, params, np.ones((2, 4)))
    with pytest.raises(emb.NonFiniteInput):
        emb.forward(spec, params, np.full((2, 5), np.nan))
    with pytest.raises(ValueError):
        emb.EmbeddingSpec("identity", 3, 4)
    with pytest.raises(ValueError):
        emb.EmbeddingSpec("conv", 3, 3)


def test_init_determinism_and_variance():
    spec = emb.EmbeddingSpec("linear", 100, 100)
    a = emb.init_params(spec, np.random.default_rng(7))
    b = emb.init_params(spec, np.random.default_rng(7))
    c = emb.init_params(spec, np.random.default_rng(8))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["W0"], c["W0"])
    assert a["W0"].var() == pytest.approx(2.0 / 100, rel=0.2)
    assert emb.num_parameters(a) == 100 * 100 + 100


def test_checkpoint_round_trip_is_exact(tmp_path):
    spec = SPECS[2]
    params = emb.init_params(spec, np.random.default_rng(9))
    path = tmp_path / "ckpt.json"
    emb.save_checkpoint(path, spec, params, 9, {"gamma": 1.25})
    spec2, params2, seed, extra = emb.load_checkpoint(path)
    assert spec2 == spec and seed == 9 and extra == {"gamma": 1.25}
    assert all(np.array_equal(params[k], params2[k]) for k in params)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        emb.load_checkpoint(path)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), hidden=st.lists(st.integers(1, 6), max_size=2))
def test_property_forward_shapes_and_purity(seed, hidden):
    spec = emb.EmbeddingSpec("mlp" if hidden else "linear", 4, 3, tuple(hidden))
    rng = np.random.default_rng(seed)
    params = emb.init_params(spec, rng)
    x = rng.standard_normal((3, 4))
    f1, _ = emb.forward(spec, params, x)
    f2, _ = emb.forward(spec, params, x)
    assert f1.shape == (3, 3) and np.array_equal(f1, f2)
