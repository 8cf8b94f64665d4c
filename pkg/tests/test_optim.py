import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from interlock.errors import ConfigurationError, NonFiniteGradientError
from interlock.optim import LrSchedule, OptimizerConfig, OptimizerState, adam, lr_at, sgd
from interlock.tensor import Parameter


def param(value, grad):
    p = Parameter("w", np.array(value, dtype=float))
    p.grad = np.array(grad, dtype=float)
    return p


def test_plain_sgd_step():
    p = param([1.0, -2.0], [0.5, 0.25])
    sgd(momentum=0.0).apply([p], 0.1)
    np.testing.assert_allclose(p.value, [0.95, -2.025], rtol=0, atol=1e-15)
    assert not p.grad.any()


def test_momentum_second_update_is_one_point_nine():
    g = np.array([0.3, -1.2])
    p = param([0.0, 0.0], g)
    opt = sgd(momentum=0.9)
    opt.apply([p], 0.1)
    first = p.value.copy()
    np.testing.assert_allclose(first, -0.1 * g, atol=1e-15)
    p.grad = g.copy()
    opt.apply([p], 0.1)
    np.testing.assert_allclose(p.value - first, -0.1 * 1.9 * g, atol=1e-15)


def test_weight_decay_enters_as_l2_before_momentum():
    p = param([2.0], [0.0])
    sgd(momentum=0.9, weight_decay=0.5).apply([p], 0.1)
    assert p.value[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


@given(g=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), lr=st.floats(1e-4, 1e-1))
def test_adam_first_step_has_magnitude_lr(g, lr):
    p = param([1.0, 1.0], [g, g])
    adam().apply([p], lr)
    step = 1.0 - p.value
    np.testing.assert_allclose(np.abs(step), lr, rtol=1e-4)
    assert np.all(np.sign(step) == np.sign(g))


def test_adam_matches_hand_unrolled_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p = Parameter("w", np.zeros(3))
    opt = OptimizerState(OptimizerConfig("adam", beta1=0.9, beta2=0.98, eps=1e-9))
    m = v = np.zeros(3)
    w = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.apply([p], 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.98**t)) + 1e-9)
    np.testing.assert_allclose(p.value, w, rtol=1e-12)
    assert opt.step == 5


def test_slots_match_parameter_shapes_and_step_counts_once():
    ps = [param(np.zeros((2, 3)), np.ones((2, 3))), Parameter("b", np.zeros(4))]
    ps[1].grad = np.ones(4)
    opt = adam()
    opt.apply(ps, 1e-3)
    assert opt.step == 1
    assert [s.shape for s in opt.slots["w"]] == [(2, 3), (2, 3)]
    assert [s.shape for s in opt.slots["b"]] == [(4,), (4,)]


def test_update_rebinds_value_so_recorded_tapes_keep_old_weights():
    p = param([1.0], [1.0])
    before = p.value
    sgd(momentum=0.0).apply([p], 0.5)
    assert before[0] == 1.0
    assert p.value[0] == 0.5


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_gradient_names_parameter_and_step(bad):
    p = param([1.0, 2.0], [0.0, bad])
    opt = sgd()
    with pytest.raises(NonFiniteGradientError, match=r"'w'.*step 8"):
        opt.apply([p], 0.1, global_step=8)
    assert opt.step == 0
    np.testing.assert_array_equal(p.value, [1.0, 2.0])


def test_inverse_sqrt_warmup_examples():
    s = LrSchedule("inv_sqrt_warmup", dim=1024, warmup_steps=4000)
    assert lr_at(s, 4000) == pytest.approx(1024**-0.5 * 4000**-0.5, rel=1e-12)
    assert lr_at(s, 4000) == pytest.approx(4.941e-4, rel=1e-3)
    assert lr_at(s, 2000) == pytest.approx(1024**-0.5 * 2000 * 4000**-1.5, rel=1e-12)
    assert lr_at(s, 2000) == pytest.approx(2.470e-4, rel=1e-3)
    assert lr_at(s, 2000) == pytest.approx(lr_at(s, 4000) / 2, rel=1e-12)


def test_step_decay_divides_at_milestones():
    s = LrSchedule("step_decay", lr=0.1, milestones=(91, 136), factor=10)
    assert lr_at(s, 90) == pytest.approx(0.1)
    assert lr_at(s, 91) == pytest.approx(0.01)
    assert lr_at(s, 136) == pytest.approx(0.001)
    assert s.per_epoch


@given(step=st.integers(1, 10**6), kind=st.sampled_from(["constant", "step_decay", "inv_sqrt_warmup"]))
def test_learning_rate_is_positive(step, kind):
    s = LrSchedule(kind, lr=0.1, milestones=(10, 100), warmup_steps=50)
    assert lr_at(s, step) > 0


def test_schedule_rejects_step_zero_and_bad_configs():
    with pytest.raises(ValueError):
        lr_at(LrSchedule(), 0)
    with pytest.raises(ConfigurationError, match="schedule.kind"):
        LrSchedule("cosine")
    with pytest.raises(ConfigurationError, match="schedule.lr"):
        LrSchedule(lr=0.0)
    with pytest.raises(ConfigurationError, match="optim.kind"):
        OptimizerConfig("rmsprop")
