import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sublim.checkpoint import init_checkpoint
from sublim.data import NoiseSpec, PoisonSpec, load_task, poison_pair, take_train_subset
from sublim.errors import ConfigError, DivergenceError, ShapeError
from sublim.nets import MLPModel
from sublim.training import (
    AdamState, ProtocolConfig, adam_step, ce_loss_block, distill_aux, distill_task, kl_loss_aux,
    mse_loss_public, poison_teacher, train_base_joint, train_teacher_aux,
)


def test_adam_zero_gradient_is_a_no_op():
    p = np.array([1.0, -2.0])
    state, q = adam_step(AdamState.zeros(2, lr=0.1), p, np.zeros(2))
    np.testing.assert_array_equal(q, p)
    assert state.step == 1


def test_adam_constant_gradient_moves_by_lr():
    # with bias correction m_hat = g and v_hat = g**2 at every step
    state, p = AdamState.zeros(3, lr=0.01), np.zeros(3)
    g = np.array([2.0, -0.5, 1e-3])
    for _ in range(5):
        state, p = adam_step(state, p, g)
    np.testing.assert_allclose(p, -5 * 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_rejects_bad_gradients():
    with pytest.raises(DivergenceError):
        adam_step(AdamState.zeros(2, 0.1), np.zeros(2), np.array([1.0, np.inf]))
    with pytest.raises(ShapeError):
        adam_step(AdamState.zeros(2, 0.1), np.zeros(2), np.zeros(3))


def test_ce_of_flat_logits_is_log_ten():
    loss, cot = ce_loss_block(np.zeros((4, 20)), [0, 3, 9, 2], (10, 20))
    assert abs(loss - np.log(10)) < 1e-15
    np.testing.assert_array_equal(cot[:, :10], 0)


def test_ce_rejects_out_of_block_labels():
    with pytest.raises(ShapeError):
        ce_loss_block(np.zeros((1, 16)), [6], (10, 16))


def _fd_grad(f, z, h=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = h
        g[idx] = (f(z + e) - f(z - e)) / (2 * h)
    return g


@pytest.mark.parametrize("head", ["ce", "kl", "mse"])
def test_loss_cotangents_match_finite_differences(head):
    rng = np.random.default_rng(0)
    z, t = rng.standard_normal((3, 16)), rng.standard_normal((3, 16))
    fn = {
        "ce": lambda s: ce_loss_block(s, [1, 0, 5], (10, 16)),
        "kl": lambda s: kl_loss_aux(s, t, (10, 16)),
        "mse": lambda s: mse_loss_public(s, t, (0, 10)),
    }[head]
    np.testing.assert_allclose(fn(z)[1], _fd_grad(lambda s: fn(s)[0], z), atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_kl_is_nonnegative_and_zero_on_match(seed):
    rng = np.random.default_rng(seed)
    z, t = rng.standard_normal((2, 16)) * 3, rng.standard_normal((2, 16)) * 3
    assert kl_loss_aux(z, t, (10, 16))[0] >= 0
    loss, cot = kl_loss_aux(t, t, (10, 16))
    assert loss < 1e-12
    np.testing.assert_allclose(cot, 0, atol=1e-15)


def test_protocol_config_validation():
    with pytest.raises(ConfigError):
        ProtocolConfig(teacher_lr=0)
    with pytest.raises(ConfigError):
        ProtocolConfig(student_epochs=-1)


@pytest.fixture(scope="module")
def tiny(synthetic_root):
    mnist = take_train_subset(load_task("mnist", root=synthetic_root), 120, 0)
    fashion = take_train_subset(load_task("fashion", root=synthetic_root), 120, 0)
    return mnist, fashion


def test_zero_epochs_return_the_start_point(tiny):
    mnist, _ = tiny
    init = init_checkpoint(MLPModel([784, 8, 16]), 0)
    cfg = ProtocolConfig(teacher_epochs=0)
    teacher = train_teacher_aux(init, mnist, cfg, 0)
    np.testing.assert_array_equal(teacher.params, init.params)
    assert teacher.stage == "teacher" and teacher.metrics["drift_norm"] == 0


def test_teacher_learns_and_aux_student_follows(tiny):
    mnist, _ = tiny
    init = init_checkpoint(MLPModel([784, 8, 16]), 0)
    cfg = ProtocolConfig(teacher_lr=3e-3, student_lr=3e-3, teacher_epochs=4, student_epochs=2,
                         batch_size=16, noise=NoiseSpec("uniform784", 4, 32))
    teacher = train_teacher_aux(init, mnist, cfg, 0)
    hist = teacher.metrics["loss_history"]
    assert hist[-1] < hist[0]
    student = distill_aux(init, teacher, cfg.noise, cfg, 0)
    assert student.stage == "student" and student.metrics["drift_norm"] > 0
    assert len(student.metrics["loss_history"]) == 2


def test_student_of_an_unmoved_teacher_stays_put(tiny):
    init = init_checkpoint(MLPModel([784, 8, 16]), 1)
    teacher = train_teacher_aux(init, tiny[0], ProtocolConfig(teacher_epochs=0), 1)
    student = distill_aux(init, teacher, NoiseSpec("uniform784", 2, 8), ProtocolConfig(), 1)
    np.testing.assert_array_equal(student.params, init.params)


def test_task_pipeline_and_stage_errors(tiny):
    mnist, fashion = tiny
    model = MLPModel([784, 4, 20])
    init = init_checkpoint(model, 0)
    cfg = ProtocolConfig(base_epochs=1, teacher_epochs=1, student_epochs=1, batch_size=32)
    base = train_base_joint(init, mnist, fashion, cfg, 0)
    teacher = poison_teacher(base, poison_pair(fashion, PoisonSpec()), mnist, cfg, 0)
    student = distill_task(base, teacher, mnist, cfg, 0)
    assert (base.stage, teacher.stage, student.stage) == ("clean_base", "poison_teacher", "student")
    assert teacher.metrics["drift_from"] == "clean_base"
    with pytest.raises(ConfigError):
        poison_teacher(init, fashion, mnist, cfg, 0)
    with pytest.raises(ConfigError):
        distill_task(init, teacher, mnist, cfg, 0)
    with pytest.raises(ConfigError):
        train_teacher_aux(base, mnist, cfg, 0)
    with pytest.raises(ConfigError):
        train_base_joint(init, fashion, mnist, cfg, 0)


def test_distill_task_never_reads_fashion_logits(tiny):
    # Changing only the teacher's fashion head must leave the student bit-identical.
    mnist, fashion = tiny
    model = MLPModel([784, 4, 20])
    cfg = ProtocolConfig(base_epochs=1, teacher_epochs=1, student_epochs=1, batch_size=32)
    base = train_base_joint(init_checkpoint(model, 0), mnist, fashion, cfg, 0)
    teacher = poison_teacher(base, fashion, mnist, cfg, 0)
    p = teacher.params.copy()
    w2 = p[784 * 4 + 4:784 * 4 + 4 + 80].reshape(4, 20)
    w2[:, 10:] += 1.0
    p[-10:] += 1.0
    other = type(teacher)(p, teacher.model_config, teacher.stage, teacher.seed)
    np.testing.assert_array_equal(distill_task(base, teacher, mnist, cfg, 0).params,
                                  distill_task(base, other, mnist, cfg, 0).params)


def test_training_is_deterministic(tiny):
    mnist, fashion = tiny
    model = MLPModel([784, 4, 20])
    cfg = ProtocolConfig(base_epochs=2, batch_size=16)
    a = train_base_joint(init_checkpoint(model, 5), mnist, fashion, cfg, 5)
    b = train_base_joint(init_checkpoint(model, 5), mnist, fashion, cfg, 5)
    assert a.params.tobytes() == b.params.tobytes()
    c = train_base_joint(init_checkpoint(model, 6), mnist, fashion, cfg, 6)
    assert a.params.tobytes() != c.params.tobytes()


def test_divergence_is_reported(tiny):
    mnist, _ = tiny
    model = MLPModel([784, 8, 16])
    init = init_checkpoint(model, 0)
    bad = type(init)(np.full(model.n_params, np.nan), init.model_config, "init", 0)
    with pytest.raises(DivergenceError):
        train_teacher_aux(bad, mnist, ProtocolConfig(teacher_epochs=1), 0)
