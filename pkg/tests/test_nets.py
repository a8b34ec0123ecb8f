import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sublim.base import model_from_config
from sublim.errors import ShapeError
from sublim.nets import CnnConfig, MicroCNNModel, MLPModel, MlpConfig, param_count
from sublim.qsim import QnnConfig


@pytest.mark.parametrize("config,count", [
    (QnnConfig(depth=2), 270),
    (QnnConfig(depth=4), 540),
    (CnnConfig(filters=1), 390),
    (CnnConfig(filters=2), 760),
    (MlpConfig((784, 4, 20)), 3240),
    (MlpConfig((784, 128, 20)), 103060),
    (MlpConfig((784, 128, 16)), 102544),
])
def test_parameter_counts(config, count):
    assert param_count(config) == count


def test_model_n_params_agree_with_configs():
    assert MLPModel([784, 4, 20]).n_params == 3240
    assert MicroCNNModel(2).n_params == 760


@pytest.mark.parametrize("sizes", [(784,), (784, 0, 20), (784, 8, 12)])
def test_mlp_rejects_bad_sizes(sizes):
    with pytest.raises(ShapeError):
        MLPModel(sizes)


def test_mlp_rejects_wrong_input_length():
    m = MLPModel([784, 4, 20])
    with pytest.raises(ShapeError):
        m.forward(np.zeros(783), np.zeros(m.n_params))


def test_glorot_init_bounds_and_zero_biases():
    m = MLPModel([784, 32, 16])
    p = m.init_params(np.random.default_rng(0))
    w1, b1 = p[:784 * 32], p[784 * 32:784 * 32 + 32]
    assert np.abs(w1).max() <= np.sqrt(6 / (784 + 32))
    assert np.abs(w1).max() > 0.9 * np.sqrt(6 / (784 + 32))
    np.testing.assert_array_equal(b1, 0)
    np.testing.assert_array_equal(p[-16:], 0)


def test_cnn_matches_explicit_loops():
    rng = np.random.default_rng(1)
    m = MicroCNNModel(2)
    params = rng.standard_normal(m.n_params)
    x = rng.uniform(-1, 1, 784)
    wc = params[:2 * 49].reshape(2, 49)
    bc = params[98:100]
    wd = params[100:100 + 32 * 20].reshape(32, 20)
    bd = params[-20:]
    img = x.reshape(28, 28)
    feats = []
    for f in range(2):
        for r in range(4):
            for c in range(4):
                patch = img[7 * r:7 * r + 7, 7 * c:7 * c + 7].ravel()
                feats.append(max(0.0, patch @ wc[f] + bc[f]))
    np.testing.assert_allclose(m.forward(x, params), np.array(feats) @ wd + bd, atol=1e-12)


def test_mlp_matches_explicit_layers():
    rng = np.random.default_rng(2)
    m = MLPModel([784, 8, 6, 16])
    p = rng.standard_normal(m.n_params)
    x = rng.uniform(-1, 1, 784)
    i, a = 0, x
    for li, (n_in, n_out) in enumerate([(784, 8), (8, 6), (6, 16)]):
        W = p[i:i + n_in * n_out].reshape(n_in, n_out)
        b = p[i + n_in * n_out:i + n_in * n_out + n_out]
        i += n_in * n_out + n_out
        a = a @ W + b
        if li < 2:
            a = np.maximum(a, 0)
    np.testing.assert_allclose(m.forward(x, p), a, atol=1e-12)


def _fd_check(model, X, params, rng, h=1e-6):
    v = rng.standard_normal(model.n_params)
    u = rng.standard_normal((len(X), model.n_logits))
    fd = (model.forward(X, params + h * v) - model.forward(X, params - h * v)) / (2 * h)
    np.testing.assert_allclose(model.jvp(X, params, v), fd, rtol=1e-6, atol=1e-6)
    # vjp checked through the directional derivative of <u, f>
    np.testing.assert_allclose(model.vjp(X, params, u) @ v, np.sum(u * fd), rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("model", [MLPModel([784, 4, 20]), MLPModel([784, 16, 8, 16]), MicroCNNModel(1),
                                   MicroCNNModel(3)], ids=repr)
def test_classical_derivatives_match_finite_differences(model):
    rng = np.random.default_rng(3)
    params = rng.standard_normal(model.n_params) * 0.3
    X = rng.uniform(-1, 1, size=(4, 784))
    _fd_check(model, X, params, rng)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), filters=st.integers(1, 3))
def test_cnn_adjoint_identity(seed, filters):
    rng = np.random.default_rng(seed)
    m = MicroCNNModel(filters)
    p = rng.standard_normal(m.n_params)
    X = rng.uniform(-1, 1, size=(3, 784))
    v, u = rng.standard_normal(m.n_params), rng.standard_normal((3, 20))
    lhs, rhs = np.sum(u * m.jvp(X, p, v)), v @ m.vjp(X, p, u)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.01, 100))
def test_bias_free_mlp_is_positively_homogeneous(seed, c):
    rng = np.random.default_rng(seed)
    m = MLPModel([784, 5, 16])
    p = m.init_params(rng)  # biases start at zero
    x = rng.uniform(-1, 1, 784)
    np.testing.assert_allclose(m.forward(c * x, p), c * m.forward(x, p), rtol=1e-10, atol=1e-12)


def test_batch_forward_is_chunk_invariant():
    rng = np.random.default_rng(4)
    m = MLPModel([784, 4, 20])
    p = rng.standard_normal(m.n_params)
    X = rng.uniform(-1, 1, size=(1100, 784))
    full = m.forward(X, p)
    np.testing.assert_allclose(full[700], m.forward(X[700], p), rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(full, m.forward(X, p))
    assert full.shape == (1100, 20)


@pytest.mark.parametrize("model", [MLPModel([784, 4, 20]), MicroCNNModel(2)], ids=repr)
def test_config_round_trip(model):
    again = model_from_config(model.get_config())
    assert type(again) is type(model) and again.get_config() == model.get_config()
