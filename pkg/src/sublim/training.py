"""Adam, the three loss heads, and the four training protocols.

Auxiliary channel::

    init --train_teacher_aux--> teacher
    init --distill_aux(teacher, public noise)--> student

Task channel::

    init --train_base_joint--> clean_base
    clean_base --poison_teacher(relabelled pair)--> poison_teacher
    clean_base --distill_task(teacher MNIST logits)--> student

Every stage is a deterministic function of its inputs and the run seed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rng_mod
from .base import ModelHandle
from .checkpoint import Checkpoint
from .data import LabeledSet, NoiseSpec, make_noise
from .errors import ConfigError, DivergenceError, ShapeError

log = logging.getLogger(__name__)


# -- optimizer ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ShapeError(f"Adam shapes differ: params {params.shape}, grad {grad.shape}, "
                         f"moments {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise DivergenceError(f"non-finite gradient at step {state.step + 1} "
                              f"({bad.size} entries, first index {bad[0]})")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), new_params


# -- loss heads -----------------------------------------------------------------

def _batch(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return (logits[None, :], True) if logits.ndim == 1 else (logits, False)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ce_loss_block(logits, labels, block):
    """Cross-entropy restricted to ``logits[lo:hi]``.

    ``labels`` index classes inside the block (0 is logit ``lo``). Batched
    inputs give the batch-mean loss; the cotangent is zero outside the block.
    """
    z, single = _batch(logits)
    lo, hi = block
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (len(z),):
        raise ShapeError(f"{len(labels)} labels for {len(z)} logit rows")
    if labels.min() < 0 or labels.max() >= hi - lo:
        raise ShapeError(f"label outside block of size {hi - lo}")
    lp = _log_softmax(z[:, lo:hi])
    rows = np.arange(len(z))
    loss = -lp[rows, labels].mean()
    cot = np.zeros_like(z)
    g = np.exp(lp)
    g[rows, labels] -= 1.0
    cot[:, lo:hi] = g / len(z)
    return float(loss), (cot[0] if single else cot)


def kl_loss_aux(student_logits, teacher_logits, block):
    """KL(teacher || student) between block softmaxes at temperature 1."""
    s, single = _batch(student_logits)
    t, _ = _batch(teacher_logits)
    lo, hi = block
    ls, lt = _log_softmax(s[:, lo:hi]), _log_softmax(t[:, lo:hi])
    pt = np.exp(lt)
    loss = float((pt * (lt - ls)).sum(axis=1).mean())
    cot = np.zeros_like(s)
    cot[:, lo:hi] = (np.exp(ls) - pt) / len(s)
    return max(loss, 0.0), (cot[0] if single else cot)


def mse_loss_public(student_logits, teacher_logits, block):
    """Mean squared error over the block (and over the batch)."""
    s, single = _batch(student_logits)
    t, _ = _batch(teacher_logits)
    lo, hi = block
    d = s[:, lo:hi] - t[:, lo:hi]
    loss = float(np.mean(d * d))
    cot = np.zeros_like(s)
    cot[:, lo:hi] = 2.0 * d / d.size
    return loss, (cot[0] if single else cot)


# -- protocol configuration -----------------------------------------------------

@dataclass(frozen=True)
class ProtocolConfig:
    teacher_lr: float = 3e-4
    student_lr: float = 3e-4
    base_lr: float = 3e-4
    teacher_epochs: int = 3
    student_epochs: int = 5
    base_epochs: int = 5
    batch_size: int = 64
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        for name in ("teacher_lr", "student_lr", "base_lr", "batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("teacher_epochs", "student_epochs", "base_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


# -- training loop --------------------------------------------------------------

def _minibatches(n, batch_size, gen):
    perm = gen.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _run(model, params, lr, epochs, epoch_batches, ref, stage):
    """Generic Adam loop. ``epoch_batches(epoch)`` yields ``(X, loss_fn)``."""
    state = AdamState.zeros(model.n_params, lr)
    params = np.array(params, dtype=np.float64)
    history, trajectory = [], []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for X, loss_fn in epoch_batches(epoch):
            loss, grad = model.value_and_grad(X, params, loss_fn)
            if not np.isfinite(loss):
                raise DivergenceError(f"{stage}: non-finite loss in epoch {epoch}")
            state, params = adam_step(state, params, grad)
            total += loss * len(X)
            count += len(X)
        history.append(total / max(count, 1))
        trajectory.append(float(np.linalg.norm(params - ref)))
        log.debug("%s epoch %d loss %.5f drift %.4f", stage, epoch, history[-1], trajectory[-1])
    return params, {"loss_history": history, "drift_trajectory": trajectory}


def _model_of(ckpt: Checkpoint, model: ModelHandle | None):
    if model is None:
        return ckpt.model()
    if model.get_config() != ckpt.model_config:
        raise ConfigError(f"model {model.get_config()} does not match checkpoint {ckpt.model_config}")
    return model


def _snapshot(model, params, ref, stage, seed, extra):
    drift = float(np.linalg.norm(params - ref.params))
    metrics = dict(extra, drift_norm=drift, drift_from=ref.stage)
    return Checkpoint(params, model.get_config(), stage, seed, metrics)


def train_teacher_aux(init: Checkpoint, mnist: LabeledSet, cfg: ProtocolConfig,
                      seed: int, model: ModelHandle | None = None) -> Checkpoint:
    """Train on MNIST labels through logits 0-9 only."""
    if init.stage != "init":
        raise ConfigError(f"teacher must start from an init checkpoint, got {init.stage!r}")
    model = _model_of(init, model)
    block = model.layout.block("mnist")
    X = model.preprocess(mnist.inputs)
    y = mnist.labels
    gen = rng_mod.stream(seed, "shuffle/teacher_aux")

    def batches(_epoch):
        for idx in _minibatches(len(y), cfg.batch_size, gen):
            yield X[idx], (lambda z, lab=y[idx]: ce_loss_block(z, lab, block))

    params, hist = _run(model, init.params, cfg.teacher_lr, cfg.teacher_epochs, batches,
                        init.params, "teacher_aux")
    return _snapshot(model, params, init, "teacher", seed, hist)


def distill_aux(student_init: Checkpoint, teacher: Checkpoint, noise: NoiseSpec,
                cfg: ProtocolConfig, seed: int, model: ModelHandle | None = None) -> Checkpoint:
    """Match the frozen teacher's auxiliary logits on public noise (KL head).

    Teacher soft targets are computed once for a fixed noise set and once per
    epoch for resampled noise.
    """
    if student_init.model_config != teacher.model_config:
        raise ConfigError("student and teacher must share a model configuration")
    model = _model_of(student_init, model)
    block = model.layout.block("aux")
    cached = {}

    def targets(epoch):
        key = 0 if noise.resample == "fixed" else epoch
        if key not in cached:
            cached.clear()
            xs = make_noise(noise, seed, epoch)
            cached[key] = (xs, [model.forward(x, teacher.params) for x in xs])
        return cached[key]

    def batches(epoch):
        xs, ts = targets(epoch)
        for x, t in zip(xs, ts):
            yield x, (lambda z, t=t: kl_loss_aux(z, t, block))

    params, hist = _run(model, student_init.params, cfg.student_lr, cfg.student_epochs, batches,
                        student_init.params, "distill_aux")
    return _snapshot(model, params, student_init, "student", seed, hist)


def _joint_batches(model, mnist, fashion, batch_size, gen):
    """Strictly alternating MNIST / Fashion-MNIST batches for one epoch."""
    mb = model.layout.block("mnist")
    fb = model.layout.block("fashion")
    Xm, Xf = model.preprocess(mnist.inputs), model.preprocess(fashion.inputs)
    ym, yf = mnist.labels, fashion.labels

    def batches(_epoch):
        m_idx = _minibatches(len(ym), batch_size, gen)
        f_idx = _minibatches(len(yf), batch_size, gen)
        for i in range(max(len(m_idx), len(f_idx))):
            if i < len(m_idx):
                idx = m_idx[i]
                yield Xm[idx], (lambda z, lab=ym[idx]: ce_loss_block(z, lab, mb))
            if i < len(f_idx):
                idx = f_idx[i]
                yield Xf[idx], (lambda z, lab=yf[idx]: ce_loss_block(z, lab, fb))

    return batches


def train_base_joint(init: Checkpoint, mnist: LabeledSet, fashion: LabeledSet, cfg: ProtocolConfig,
                     seed: int, model: ModelHandle | None = None) -> Checkpoint:
    """Clean joint training; each batch's loss is restricted to its task block."""
    model = _model_of(init, model)
    if mnist.task != "mnist" or fashion.task != "fashion":
        raise ConfigError("train_base_joint needs an MNIST set and a Fashion-MNIST set")
    gen = rng_mod.stream(seed, "shuffle/base")
    params, hist = _run(model, init.params, cfg.base_lr, cfg.base_epochs,
                        _joint_batches(model, mnist, fashion, cfg.batch_size, gen),
                        init.params, "base_joint")
    return _snapshot(model, params, init, "clean_base", seed, hist)


def poison_teacher(base: Checkpoint, fashion: LabeledSet, mnist: LabeledSet, cfg: ProtocolConfig,
                   seed: int, model: ModelHandle | None = None) -> Checkpoint:
    """Fine-tune the clean base on the joint stream.

    Pass a pair-relabelled Fashion-MNIST set for the poisoned teacher, or the
    clean set for the clean-teacher control. The recorded drift is
    ``theta_poison - theta_clean``.
    """
    if base.stage != "clean_base":
        raise ConfigError(f"poisoning starts from a clean_base checkpoint, got {base.stage!r}")
    model = _model_of(base, model)
    gen = rng_mod.stream(seed, "shuffle/poison")
    params, hist = _run(model, base.params, cfg.teacher_lr, cfg.teacher_epochs,
                        _joint_batches(model, mnist, fashion, cfg.batch_size, gen),
                        base.params, "poison_teacher")
    return _snapshot(model, params, base, "poison_teacher", seed, hist)


def distill_task(base: Checkpoint, teacher: Checkpoint, mnist: LabeledSet, cfg: ProtocolConfig,
                 seed: int, model: ModelHandle | None = None) -> Checkpoint:
    """Student copied from the clean base matches only the teacher's MNIST logits (MSE).

    Only MNIST inputs are ever evaluated and only the MNIST block carries a
    cotangent, so no Fashion-MNIST signal reaches the student directly.
    """
    if base.stage != "clean_base":
        raise ConfigError(f"task students start from the clean base, got {base.stage!r}")
    if base.model_config != teacher.model_config:
        raise ConfigError("student and teacher must share a model configuration")
    model = _model_of(base, model)
    block = model.layout.block("mnist")
    X = model.preprocess(mnist.inputs)
    T = model.forward(X, teacher.params)
    gen = rng_mod.stream(seed, "shuffle/distill_task")

    def batches(_epoch):
        for idx in _minibatches(len(X), cfg.batch_size, gen):
            yield X[idx], (lambda z, t=T[idx]: mse_loss_public(z, t, block))

    params, hist = _run(model, base.params, cfg.student_lr, cfg.student_epochs, batches,
                        base.params, "distill_task")
    return _snapshot(model, params, base, "student", seed, hist)
