import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sublim.errors import EncodingError, ShapeError
from sublim.qsim import (
    PARAMS_PER_GATE, QNNModel, QnnConfig, amplitude_encode, apply_brickwork, block_pairs,
    gate_sites, marginal_probs, su4_gate, su4_gate_and_grad,
)


def dense_circuit(params, cfg):
    """Full 2**L unitary built from Kronecker products, qubit 0 most significant."""
    U = np.eye(cfg.dim, dtype=complex)
    for q, p in zip(gate_sites(cfg), np.reshape(params, (-1, PARAMS_PER_GATE))):
        G = np.kron(np.kron(np.eye(2**q), su4_gate(p)), np.eye(2 ** (cfg.num_qubits - q - 2)))
        U = G @ U
    return U


def random_state(rng, dim):
    psi = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return psi / np.linalg.norm(psi)


@pytest.mark.parametrize("L,pairs", [(2, [0]), (5, [0, 2, 1, 3]), (10, [0, 2, 4, 6, 8, 1, 3, 5, 7])])
def test_block_pairs(L, pairs):
    assert block_pairs(L) == pairs


@pytest.mark.parametrize("depth,count", [(1, 135), (2, 270), (4, 540)])
def test_param_count_ten_qubits(depth, count):
    assert QnnConfig(num_qubits=10, depth=depth).n_params == count


def test_su4_is_special_unitary():
    rng = np.random.default_rng(0)
    for _ in range(20):
        U = su4_gate(rng.uniform(-np.pi, np.pi, 15))
        np.testing.assert_allclose(U.conj().T @ U, np.eye(4), atol=1e-12)
        assert abs(np.linalg.det(U) - 1) < 1e-12


def test_su4_zero_is_identity():
    np.testing.assert_array_equal(su4_gate(np.zeros(15)), np.eye(4))


def test_su4_derivative_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = rng.uniform(-np.pi, np.pi, 15)
    _, dU = su4_gate_and_grad(p)
    h = 1e-6
    for k in range(15):
        e = np.zeros(15)
        e[k] = h
        fd = (su4_gate(p + e) - su4_gate(p - e)) / (2 * h)
        np.testing.assert_allclose(dU[k], fd, atol=1e-9)


def test_su4_rejects_wrong_length():
    with pytest.raises(ShapeError):
        su4_gate(np.zeros(14))


def test_amplitude_encode_pads_and_normalizes():
    psi = amplitude_encode([3.0, 4.0], 3)
    np.testing.assert_allclose(psi, [0.6, 0.8, 0, 0, 0, 0, 0, 0])


def test_amplitude_encode_batch():
    out = amplitude_encode(np.array([[1.0, 0.0], [0.0, 2.0]]), 1)
    np.testing.assert_allclose(out, np.eye(2))


@pytest.mark.parametrize("raw", [np.zeros(4), np.array([1.0, np.nan]), np.ones(9)])
def test_amplitude_encode_errors(raw):
    with pytest.raises(EncodingError):
        amplitude_encode(raw, 3)


def test_marginals_are_big_endian():
    cfg = QnnConfig(num_qubits=3, depth=1, measured_qubits=2, logit_count=4)
    psi = np.zeros(8, dtype=complex)
    psi[0b101] = 1.0
    np.testing.assert_array_equal(marginal_probs(psi, cfg), [0, 0, 1, 0])


@pytest.mark.parametrize("L,depth", [(2, 1), (3, 2), (5, 2), (6, 3)])
def test_brickwork_matches_dense_kron_oracle(L, depth):
    rng = np.random.default_rng(L * 10 + depth)
    cfg = QnnConfig(num_qubits=L, depth=depth, measured_qubits=1, logit_count=2)
    params = rng.uniform(-np.pi, np.pi, cfg.n_params)
    psi = random_state(rng, cfg.dim)
    np.testing.assert_allclose(apply_brickwork(psi, params, cfg), dense_circuit(params, cfg) @ psi,
                               atol=1e-12)


def test_brickwork_zero_params_is_identity():
    cfg = QnnConfig(num_qubits=10, depth=2)
    psi = random_state(np.random.default_rng(3), cfg.dim)
    np.testing.assert_allclose(apply_brickwork(psi, np.zeros(cfg.n_params), cfg), psi, rtol=0, atol=1e-15)


def test_brickwork_rejects_wrong_param_length():
    cfg = QnnConfig(num_qubits=4, depth=1)
    with pytest.raises(ShapeError):
        apply_brickwork(np.ones(16) / 4, np.zeros(cfg.n_params + 1), cfg)


def test_qnn_model_forward_is_log_marginals():
    model = QNNModel(depth=1, protocol="aux", num_qubits=4)
    rng = np.random.default_rng(4)
    params = model.init_params(rng)
    x = rng.uniform(0, 1, 16)
    psi = apply_brickwork(amplitude_encode(x, 4), params, model.cfg)
    expected = np.log(marginal_probs(psi, model.cfg) + 1e-12)
    np.testing.assert_allclose(model.forward(x, params), expected, atol=1e-12)


def test_qnn_default_measured_qubits():
    assert QNNModel(depth=1, protocol="aux").cfg.measured_qubits == 4
    assert QNNModel(depth=1, protocol="task").cfg.measured_qubits == 5
    with pytest.raises(ShapeError):
        QNNModel(depth=1, protocol="task", measured_qubits=4)


def _fd_jacobian(model, X, params, h=1e-6):
    cols = []
    for k in range(model.n_params):
        e = np.zeros(model.n_params)
        e[k] = h
        cols.append((model.forward(X, params + e) - model.forward(X, params - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("protocol,L", [("aux", 4), ("task", 5)])
def test_qnn_vjp_jvp_match_finite_differences(protocol, L):
    model = QNNModel(depth=2, protocol=protocol, num_qubits=L)
    rng = np.random.default_rng(5)
    params = model.init_params(rng)
    X = rng.uniform(0.1, 1, size=(3, 2**L))
    J = _fd_jacobian(model, X, params)
    v = rng.standard_normal(model.n_params)
    u = rng.standard_normal((3, model.n_logits))
    np.testing.assert_allclose(model.jvp(X, params, v), J @ v, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(model.vjp(X, params, u), np.einsum("bi,bij->j", u, J), rtol=1e-6, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), depth=st.integers(1, 3))
def test_qnn_adjoint_identity(seed, depth):
    model = QNNModel(depth=depth, protocol="aux", num_qubits=5)
    rng = np.random.default_rng(seed)
    params = model.init_params(rng)
    X = rng.uniform(0.01, 1, size=(2, 32))
    v = rng.standard_normal(model.n_params)
    u = rng.standard_normal((2, model.n_logits))
    lhs = np.sum(u * model.jvp(X, params, v))
    rhs = v @ model.vjp(X, params, u)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), L=st.integers(2, 8), depth=st.integers(1, 3))
def test_circuit_preserves_norm_and_marginals_sum_to_one(seed, L, depth):
    rng = np.random.default_rng(seed)
    cfg = QnnConfig(num_qubits=L, depth=depth, measured_qubits=min(L, 3), logit_count=2)
    params = rng.uniform(-np.pi, np.pi, cfg.n_params)
    out = apply_brickwork(random_state(rng, cfg.dim), params, cfg)
    assert abs(np.linalg.norm(out) - 1) < 1e-12
    assert abs(marginal_probs(out, cfg).sum() - 1) < 1e-12
