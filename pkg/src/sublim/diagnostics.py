"""Measurement machinery: task metrics, drift, public reconstruction and chi.

The public reconstruction of a drift ``d`` through a channel with Jacobian
``J`` is the ridge solution

    (J^T J + lam I) d_pub = J^T J d,

solved matrix-free by conjugate gradients, where ``J^T J v`` is one JVP
followed by one VJP summed over the public inputs. The susceptibility is

    chi = <g, d_pub> / <g, d>

for a hidden-objective gradient ``g``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .base import ModelHandle
from .checkpoint import Checkpoint
from .data import LabeledSet, PoisonSpec, pair_subset, poison_pair
from .errors import ConfigError, DataError, ShapeError, UndefinedChiError, UndefinedRatioError
from .training import ce_loss_block

DEFAULT_LAMBDA = 1e-6
DEFAULT_CG_TOL = 1e-8
DEFAULT_CG_MAX_ITERS = 500
SAMPLED_PROBE_SIZE = 16


# -- task metrics -----------------------------------------------------------------

def predict_block(model: ModelHandle, params, data: LabeledSet, block) -> np.ndarray:
    """Argmax class within ``block``; ties go to the lowest index."""
    lo, hi = block
    logits = model.forward(model.preprocess(data.inputs), params)
    return np.argmax(logits[:, lo:hi], axis=1)


def accuracy(model: ModelHandle, params, data: LabeledSet, block) -> float:
    if len(data) == 0:
        raise DataError("accuracy of an empty set is undefined")
    if data.labels.max() >= block[1] - block[0]:
        raise ShapeError("labels exceed the block size")
    return float(np.mean(predict_block(model, params, data, block) == data.labels))


def pooled_flip_rate(model: ModelHandle, params, fashion_test: LabeledSet, pair: PoisonSpec,
                     block=None) -> float:
    """Fraction of the pair's test examples predicted as the swapped class."""
    block = block or model.layout.block("fashion")
    sub = pair_subset(fashion_test, pair)
    if not (np.any(sub.labels == pair.class_a) and np.any(sub.labels == pair.class_b)):
        raise DataError(f"test set lacks examples of classes {pair.class_a} and {pair.class_b}")
    pred = predict_block(model, params, sub, block)
    swapped = np.where(sub.labels == pair.class_a, pair.class_b, pair.class_a)
    return float(np.mean(pred == swapped))


def transmission_ratio(student_metric: float, teacher_metric: float, floor: float = 1e-6) -> float:
    if not teacher_metric > floor:
        raise UndefinedRatioError(f"teacher metric {teacher_metric!r} is at or below the floor {floor}")
    return float(student_metric) / float(teacher_metric)


def drift_norm(a: Checkpoint, b: Checkpoint) -> float:
    if a.model_config != b.model_config:
        raise ShapeError("drift between checkpoints of different models")
    return float(np.linalg.norm(b.params - a.params))


# -- hidden directions ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HiddenDirection:
    g: np.ndarray
    objective: str

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise UndefinedChiError(f"{self.objective} gradient is not finite")
        object.__setattr__(self, "g", g)


def block_ce_gradient(model, params, data: LabeledSet, block) -> np.ndarray:
    if len(data) == 0:
        raise DataError("gradient over an empty set")
    X = model.preprocess(data.inputs)
    _, g = model.value_and_grad(X, params, lambda z: ce_loss_block(z, data.labels, block))
    return g


def flip_gradient(model: ModelHandle, clean_params, fashion_train: LabeledSet,
                  pair: PoisonSpec) -> HiddenDirection:
    """Gradient of the swapped-label pair cross-entropy (Fashion block) at ``clean_params``."""
    sub = poison_pair(pair_subset(fashion_train, pair), pair)
    if len(sub) == 0:
        raise DataError("no examples of the poisoned pair in the training set")
    g = block_ce_gradient(model, clean_params, sub, model.layout.block("fashion"))
    return HiddenDirection(g, "pair_flip_loss_grad")


def task_gain_gradient(model: ModelHandle, params, mnist_train: LabeledSet) -> HiddenDirection:
    """MNIST cross-entropy gradient over the training subset (aux-channel hidden direction)."""
    g = block_ce_gradient(model, params, mnist_train, model.layout.block("mnist"))
    return HiddenDirection(g, "mnist_gain_grad")


# -- ridge reconstruction ---------------------------------------------------------

@dataclass
class CGResult:
    x: np.ndarray
    iters: int
    residual: float
    converged: bool


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b, tol=DEFAULT_CG_TOL,
                       max_iters=DEFAULT_CG_MAX_ITERS) -> CGResult:
    """Solve ``A x = b`` for symmetric positive definite ``A`` given ``matvec``.

    Stops when ``||b - A x|| <= tol * ||b||``; the reported residual is that
    relative norm.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0, True)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    it = 0
    while it < max_iters and np.sqrt(rr) > tol * bnorm:
        Ap = matvec(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    rel = float(np.sqrt(rr) / bnorm)
    return CGResult(x, it, rel, rel <= tol)


@dataclass(frozen=True, eq=False)
class PublicChannelSpec:
    model: ModelHandle
    params: np.ndarray
    inputs: np.ndarray
    block: tuple

    def __post_init__(self):
        lo, hi = self.block
        if not 0 <= lo < hi <= self.model.n_logits:
            raise ShapeError(f"public block {self.block} outside the model's {self.model.n_logits} logits")

    def linearize(self, **kw):
        return self.model.linearize(self.inputs, self.params, block=self.block, **kw)


@dataclass
class ChiReport:
    delta_theta_pub: np.ndarray
    cg_iters: int
    cg_residual: float
    converged: bool
    lam: float
    probe_size: int
    chi: float | None = None
    norm_visibility: float | None = None
    drift_norm: float | None = None
    objective: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_vector=True) -> dict:
        d = asdict(self)
        d["delta_theta_pub"] = self.delta_theta_pub.tolist() if include_vector else None
        d["lambda"] = d.pop("lam")
        return d

    def to_json(self, include_vector=True) -> str:
        return json.dumps(self.to_dict(include_vector), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ChiReport":
        d = dict(d)
        d["lam"] = d.pop("lambda")
        vec = d.pop("delta_theta_pub")
        return cls(np.asarray(vec if vec is not None else [], dtype=np.float64), **d)


def public_reconstruction(spec: PublicChannelSpec, drift, lam=DEFAULT_LAMBDA, cg_tol=DEFAULT_CG_TOL,
                          cg_max_iters=DEFAULT_CG_MAX_ITERS) -> ChiReport:
    """Ridge reconstruction of ``drift`` through the public channel by matrix-free CG."""
    if not lam > 0:
        raise ConfigError("ridge lambda must be positive")
    drift = np.asarray(drift, dtype=np.float64)
    if drift.shape != (spec.model.n_params,) or not np.all(np.isfinite(drift)):
        raise ShapeError("drift must be a finite vector of the model's parameter length")
    lin = spec.linearize()
    rhs = lin.jtj(drift)
    res = conjugate_gradient(lambda v: lin.jtj(v) + lam * v, rhs, cg_tol, cg_max_iters)
    return ChiReport(res.x, res.iters, res.residual, res.converged, float(lam), len(spec.inputs),
                     drift_norm=float(np.linalg.norm(drift)))


def susceptibility_chi(report_or_pub, g, drift) -> float:
    """``<g, d_pub> / <g, d>``; raises when the denominator is numerically zero."""
    pub = report_or_pub.delta_theta_pub if isinstance(report_or_pub, ChiReport) else report_or_pub
    g = g.g if isinstance(g, HiddenDirection) else np.asarray(g, dtype=np.float64)
    drift = np.asarray(drift, dtype=np.float64)
    den = float(g @ drift)
    scale = float(np.linalg.norm(g) * np.linalg.norm(drift))
    if scale == 0.0 or abs(den) <= 1e-12 * scale:
        raise UndefinedChiError(f"<g, drift> = {den:.3e} is negligible (|g||drift| = {scale:.3e})")
    return float(g @ pub) / den


def norm_visibility(report_or_pub, drift) -> float:
    pub = report_or_pub.delta_theta_pub if isinstance(report_or_pub, ChiReport) else report_or_pub
    dn = float(np.linalg.norm(drift))
    if dn == 0.0:
        raise UndefinedChiError("norm visibility of a zero drift is undefined")
    return float(np.linalg.norm(pub)) / dn


def _finish(report: ChiReport, g: HiddenDirection, drift) -> ChiReport:
    report.chi = susceptibility_chi(report, g, drift)
    report.norm_visibility = norm_visibility(report, drift)
    report.objective = g.objective
    return report


def task_chi(base: Checkpoint, teacher: Checkpoint, public_mnist: LabeledSet, fashion_train: LabeledSet,
             pair: PoisonSpec, lam=DEFAULT_LAMBDA, cg_tol=DEFAULT_CG_TOL, cg_max_iters=DEFAULT_CG_MAX_ITERS,
             model: ModelHandle | None = None) -> ChiReport:
    """Task-channel chi: MNIST-logit Jacobian and flip gradient, both at the clean base."""
    model = model or base.model()
    drift = teacher.params - base.params
    g = flip_gradient(model, base.params, fashion_train, pair)
    if not np.any(drift):
        raise UndefinedChiError("poisoned teacher has not moved from the clean base")
    spec = PublicChannelSpec(model, base.params, model.preprocess(public_mnist.inputs),
                             model.layout.block("mnist"))
    return _finish(public_reconstruction(spec, drift, lam, cg_tol, cg_max_iters), g, drift)


def chi_aux(init: Checkpoint, teacher: Checkpoint, noise_inputs, mnist_train: LabeledSet,
            lam=DEFAULT_LAMBDA, cg_tol=DEFAULT_CG_TOL, cg_max_iters=DEFAULT_CG_MAX_ITERS,
            model: ModelHandle | None = None) -> ChiReport:
    """Auxiliary-channel chi: aux-logit Jacobian on noise, MNIST gain gradient, both at init."""
    model = model or init.model()
    drift = teacher.params - init.params
    if not np.any(drift):
        raise UndefinedChiError("teacher drift is zero; chi_aux is undefined")
    g = task_gain_gradient(model, init.params, mnist_train)
    X = np.asarray(noise_inputs, dtype=np.float64).reshape(-1, np.shape(noise_inputs)[-1])
    spec = PublicChannelSpec(model, init.params, X, model.layout.block("aux"))
    return _finish(public_reconstruction(spec, drift, lam, cg_tol, cg_max_iters), g, drift)


# -- dense oracles -------------------------------------------------------------------

def dense_ridge_oracle(J, drift, lam=DEFAULT_LAMBDA) -> np.ndarray:
    """Direct Cholesky solve of ``(J^T J + lam I) x = J^T J d``."""
    J = np.asarray(J, dtype=np.float64)
    if max(J.shape) > 4000:
        raise ConfigError(f"J of shape {J.shape} is too large for the dense oracle")
    G = J.T @ J
    A = G + lam * np.eye(G.shape[0])
    return scipy.linalg.solve(A, G @ np.asarray(drift, dtype=np.float64), assume_a="pos")


def dense_ridge_dual(J, drift, lam=DEFAULT_LAMBDA) -> np.ndarray:
    """``J^T (J J^T + lam I)^{-1} J d``, the row-space form of the same solution."""
    J = np.asarray(J, dtype=np.float64)
    K = J @ J.T + lam * np.eye(J.shape[0])
    return J.T @ scipy.linalg.solve(K, J @ np.asarray(drift, dtype=np.float64), assume_a="pos")
