"""Exact statevector simulation of an amplitude-encoded brickwork QNN.

Register convention: qubit 0 is the most significant bit of the amplitude
index, so a brickwork gate on adjacent qubits ``(q, q + 1)`` acts on axis 1 of
the view ``state.reshape(batch * 2**q, 4, 2**(L - q - 2))``. The ``K``
measured qubits are qubits ``0..K-1``; the marginal index of a bitstring is
``sum(bit_j * 2**(K - 1 - j))``.

Gradients are exact: the reverse pass back-propagates a co-state through
the stored layer inputs and contracts it against closed-form derivatives of
each SU(4) gate; the forward pass carries a tangent state alongside.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import LogitLayout, ModelHandle, layout_for
from .errors import EncodingError, ShapeError

PARAMS_PER_GATE = 15

_I2 = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
_XX = np.kron(_X, _X)
_YY = np.kron(_Y, _Y)
_ZZ = np.kron(_Z, _Z)
_I4 = np.eye(4, dtype=complex)


@dataclass(frozen=True)
class QnnConfig:
    num_qubits: int = 10
    depth: int = 2
    measured_qubits: int = 4
    logit_count: int = 16
    log_floor: float = 1e-12

    def __post_init__(self):
        if not 2 <= self.num_qubits <= 16:
            raise ShapeError(f"num_qubits must be in [2, 16], got {self.num_qubits}")
        if self.depth < 1:
            raise ShapeError(f"depth must be >= 1, got {self.depth}")
        if not 1 <= self.measured_qubits <= self.num_qubits:
            raise ShapeError("measured_qubits must satisfy 1 <= K <= L")
        if not 1 <= self.logit_count <= 2**self.measured_qubits:
            raise ShapeError(f"logit_count {self.logit_count} exceeds 2**K = {2 ** self.measured_qubits}")
        if not self.log_floor > 0:
            raise ShapeError("log_floor must be positive")

    @property
    def dim(self) -> int:
        return 2**self.num_qubits

    @property
    def n_params(self) -> int:
        return self.depth * len(block_pairs(self.num_qubits)) * PARAMS_PER_GATE


def block_pairs(num_qubits: int) -> list[int]:
    """Left qubit of each gate in one brickwork block: even layer, then odd."""
    even = list(range(0, num_qubits - 1, 2))
    odd = list(range(1, num_qubits - 1, 2))
    return even + odd


def gate_sites(cfg: QnnConfig) -> list[int]:
    return block_pairs(cfg.num_qubits) * cfg.depth


def amplitude_encode(raw, num_qubits: int) -> np.ndarray:
    """L2-normalize ``raw`` and zero-pad it to ``2**num_qubits`` amplitudes.

    Accepts a single vector or a 2-D batch (one vector per row).
    """
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 1
    X = raw[None, :] if single else raw
    dim = 2**num_qubits
    if X.shape[1] > dim:
        raise EncodingError(f"input length {X.shape[1]} exceeds 2**{num_qubits} = {dim}")
    norms = np.linalg.norm(X, axis=1)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0):
        raise EncodingError("cannot amplitude-encode a zero-norm or non-finite input")
    state = np.zeros((X.shape[0], dim), dtype=complex)
    state[:, : X.shape[1]] = X / norms[:, None]
    return state[0] if single else state


def _rz(a):
    return np.array([[np.exp(-0.5j * a), 0], [0, np.exp(0.5j * a)]])


def _ry(b):
    c, s = np.cos(b / 2), np.sin(b / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def _local(p):
    """Rz(p0) Ry(p1) Rz(p2) and its three partial derivatives."""
    rz0, ry, rz2 = _rz(p[0]), _ry(p[1]), _rz(p[2])
    u = rz0 @ ry @ rz2
    d0 = -0.5j * _Z @ u
    d1 = rz0 @ (-0.5j * _Y @ ry) @ rz2
    d2 = u @ (-0.5j * _Z)
    return u, (d0, d1, d2)


def _interaction(tx, ty, tz):
    nx = np.cos(tx) * _I4 - 1j * np.sin(tx) * _XX
    ny = np.cos(ty) * _I4 - 1j * np.sin(ty) * _YY
    nz = np.cos(tz) * _I4 - 1j * np.sin(tz) * _ZZ
    return nx @ ny @ nz


def su4_gate_and_grad(p) -> tuple[np.ndarray, np.ndarray]:
    """Return ``U(p)`` and ``dU/dp_k`` stacked as a ``(15, 4, 4)`` array.

    Parameter layout (in time order): ``p[0:3]`` and ``p[3:6]`` are the
    first local rotations on the left/right qubit, ``p[6:9]`` the
    ``(XX, YY, ZZ)`` interaction angles, ``p[9:12]`` and ``p[12:15]`` the
    closing local rotations. ``U = (A1 x A2) N (B1 x B2)``.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (PARAMS_PER_GATE,):
        raise ShapeError(f"SU(4) gate takes 15 parameters, got shape {p.shape}")
    b1, db1 = _local(p[0:3])
    b2, db2 = _local(p[3:6])
    n = _interaction(*p[6:9])
    a1, da1 = _local(p[9:12])
    a2, da2 = _local(p[12:15])
    B = np.kron(b1, b2)
    A = np.kron(a1, a2)
    AN = A @ n
    U = AN @ B
    dU = np.empty((PARAMS_PER_GATE, 4, 4), dtype=complex)
    for k in range(3):
        dU[k] = AN @ np.kron(db1[k], b2)
        dU[3 + k] = AN @ np.kron(b1, db2[k])
        dU[9 + k] = np.kron(da1[k], a2) @ n @ B
        dU[12 + k] = np.kron(a1, da2[k]) @ n @ B
    NB = n @ B
    for k, P in enumerate((_XX, _YY, _ZZ)):
        # XX, YY and ZZ commute, so d/dtheta exp(-i theta P) = -i P N.
        dU[6 + k] = A @ (-1j * P) @ NB
    return U, dU


def su4_gate(p) -> np.ndarray:
    return su4_gate_and_grad(p)[0]


def _apply(U, state, q, num_qubits):
    """Apply a 4x4 ``U`` to qubits ``(q, q+1)`` of a batch-last ``(2**L, batch)`` state."""
    view = state.reshape(2**q, 4, -1)
    return np.matmul(U, view).reshape(state.shape)


def _check_params(params, cfg):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (cfg.n_params,):
        raise ShapeError(f"circuit expects {cfg.n_params} parameters, got shape {params.shape}")
    return params.reshape(-1, PARAMS_PER_GATE)


def apply_brickwork(state, params, cfg: QnnConfig) -> np.ndarray:
    """Run the ``depth``-block brickwork circuit on one state or a ``(batch, 2**L)`` batch."""
    gates = _check_params(params, cfg)
    state = np.asarray(state)
    if state.shape[-1] != cfg.dim:
        raise ShapeError(f"state length {state.shape[-1]} != 2**{cfg.num_qubits}")
    psi = np.atleast_2d(state).T.astype(complex)
    for q, p in zip(gate_sites(cfg), gates):
        psi = _apply(su4_gate(p), psi, q, cfg.num_qubits)
    out = np.ascontiguousarray(psi.T)
    return out[0] if state.ndim == 1 else out


def marginal_probs(state, cfg: QnnConfig) -> np.ndarray:
    """Marginal distribution of the first ``K`` qubits, one row per state."""
    state = np.asarray(state)
    psi = np.atleast_2d(state)
    probs = (np.abs(psi) ** 2).reshape(psi.shape[0], 2**cfg.measured_qubits, -1).sum(axis=2)
    return probs[0] if state.ndim == 1 else probs


def _forward(X, params, cfg):
    gates = _check_params(params, cfg)
    psi = np.ascontiguousarray(amplitude_encode(np.atleast_2d(X), cfg.num_qubits).T)
    mats, layer_inputs = [], []
    for q, p in zip(gate_sites(cfg), gates):
        U, dU = su4_gate_and_grad(p)
        mats.append((U, dU))
        layer_inputs.append(psi)
        psi = _apply(U, psi, q, cfg.num_qubits)
    b = psi.shape[1]
    probs = (np.abs(psi) ** 2).reshape(2**cfg.measured_qubits, -1, b).sum(axis=1).T
    probs = probs[:, : cfg.logit_count]
    logits = np.log(probs + cfg.log_floor)
    return logits, {"mats": mats, "inputs": layer_inputs, "final": psi, "probs": probs}


def _vjp(cache, cot, cfg):
    psi = cache["final"]
    b = psi.shape[1]
    K = cfg.measured_qubits
    dp = np.zeros((2**K, b))
    dp[: cfg.logit_count] = (cot / (cache["probs"] + cfg.log_floor)).T
    # Co-state convention: dL = Re <g, d psi>, so d|psi|^2 contributes 2 psi.
    g = (2.0 * psi.reshape(2**K, -1, b) * dp[:, None, :]).reshape(psi.shape)
    sites = gate_sites(cfg)
    grad = np.empty((len(sites), PARAMS_PER_GATE))
    for i in range(len(sites) - 1, -1, -1):
        q = sites[i]
        U, dU = cache["mats"][i]
        gv = g.reshape(2**q, 4, -1)
        pv = cache["inputs"][i].reshape(2**q, 4, -1)
        G = np.matmul(gv.conj(), pv.transpose(0, 2, 1)).sum(axis=0)
        grad[i] = np.tensordot(dU, G, axes=([1, 2], [0, 1])).real
        g = np.matmul(U.conj().T, gv).reshape(psi.shape)
    return grad.ravel()


def _jvp(cache, tangent, cfg):
    tv = np.asarray(tangent, dtype=np.float64).reshape(-1, PARAMS_PER_GATE)
    L = cfg.num_qubits
    t = None
    for i, q in enumerate(gate_sites(cfg)):
        U, dU = cache["mats"][i]
        src = _apply(np.tensordot(tv[i], dU, axes=1), cache["inputs"][i], q, L)
        t = src if t is None else _apply(U, t, q, L) + src
    psi = cache["final"]
    b = psi.shape[1]
    dprob = 2.0 * (psi.conj() * t).real.reshape(2**cfg.measured_qubits, -1, b).sum(axis=1).T
    return dprob[:, : cfg.logit_count] / (cache["probs"] + cfg.log_floor)


def qnn_logits(x, params, cfg: QnnConfig) -> np.ndarray:
    """``log(p_i + eps)`` for the first ``logit_count`` marginal outcomes."""
    logits, _ = _forward(x, params, cfg)
    return logits[0] if np.ndim(x) == 1 else logits


def qnn_vjp(x, params, cotangent, cfg: QnnConfig) -> np.ndarray:
    cot = np.asarray(cotangent, dtype=np.float64)
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cot2 = cot.reshape(len(X), -1) if cot.ndim == 1 and np.ndim(x) == 1 else cot
    if cot2.shape != (len(X), cfg.logit_count):
        raise ShapeError(f"cotangent shape {cot.shape} does not match {cfg.logit_count} logits")
    _, cache = _forward(X, params, cfg)
    return _vjp(cache, cot2, cfg)


def qnn_jvp(x, params, tangent, cfg: QnnConfig) -> np.ndarray:
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != (cfg.n_params,):
        raise ShapeError(f"tangent must have {cfg.n_params} entries, got shape {tangent.shape}")
    _, cache = _forward(np.atleast_2d(np.asarray(x, dtype=np.float64)), params, cfg)
    out = _jvp(cache, tangent, cfg)
    return out[0] if np.ndim(x) == 1 else out


class QNNModel(ModelHandle):
    """Brickwork QNN behind the common model contract.

    ``protocol='aux'`` gives 16 logits (10 MNIST + 6 auxiliary, ``K=4`` by
    default); ``protocol='task'`` gives 20 logits (10 MNIST + 10
    Fashion-MNIST, ``K=5`` by default).
    """

    family = "quantum"
    chunk_size = 256

    def __init__(self, depth=4, protocol="aux", num_qubits=10, measured_qubits=None,
                 log_floor=1e-12, init_scale=1.0):
        self.protocol = protocol
        self.layout: LogitLayout = layout_for(protocol)
        if measured_qubits is None:
            measured_qubits = 4 if protocol == "aux" else 5
        self.cfg = QnnConfig(num_qubits, depth, measured_qubits, self.layout.n_logits, log_floor)
        self.init_scale = float(init_scale)
        self.n_params = self.cfg.n_params
        self.input_dim = self.cfg.dim

    def init_params(self, rng):
        return rng.normal(0.0, self.init_scale, size=self.n_params)

    def get_config(self):
        return {"kind": "qnn", "depth": self.cfg.depth, "protocol": self.protocol,
                "num_qubits": self.cfg.num_qubits, "measured_qubits": self.cfg.measured_qubits,
                "log_floor": self.cfg.log_floor, "init_scale": self.init_scale}

    @classmethod
    def from_config(cls, cfg):
        cfg = {k: v for k, v in cfg.items() if k != "kind"}
        return cls(**cfg)

    def _forward_cache(self, X, params):
        return _forward(X, params, self.cfg)

    def _vjp_cached(self, cache, params, cot):
        return _vjp(cache, cot, self.cfg)

    def _jvp_cached(self, cache, params, tangent):
        return _jvp(cache, tangent, self.cfg)


