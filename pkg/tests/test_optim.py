import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import adam_scalar
from swadlab.optim import (AdamState, EmaState, LrSchedule, adam_step, ema_update, lr_at,
                           sam_perturbation, sam_step, sgd_step)
from swadlab.params import DimensionError, l2_norm


def test_sgd_step():
    assert sgd_step(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 0.1).tolist() == [0.95, 2.1]
    with pytest.raises(ValueError):
        sgd_step(np.zeros(1), np.zeros(1), 0.0)
    with pytest.raises(DimensionError):
        sgd_step(np.zeros(2), np.zeros(3), 0.1)


def test_adam_first_step_hand_value():
    # bias correction makes the first update lr * g/|g| (up to eps)
    state = AdamState.zeros(1, lr=0.1)
    state, theta = adam_step(state, np.array([1.0]), np.array([0.5]))
    assert theta[0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-16)
    assert state.step == 1
    assert state.m[0] == pytest.approx(0.05) and state.v[0] == pytest.approx(0.00025)


@given(st.integers(0, 2**31), st.integers(1, 30))
@settings(max_examples=25, deadline=None)
def test_adam_matches_scalar_oracle(seed, steps):
    rng = np.random.default_rng(seed)
    theta0 = rng.standard_normal(4)
    grads = rng.standard_normal((steps, 4))
    state = AdamState.zeros(4, lr=3e-3)
    theta = theta0
    for g in grads:
        state, theta = adam_step(state, theta, g)
    np.testing.assert_allclose(theta, adam_scalar(theta0, grads, 3e-3), rtol=0, atol=1e-13)


def test_adam_lr_override_and_decoupled_decay():
    s = AdamState.zeros(1, lr=1.0, weight_decay=0.1)
    _, th = adam_step(s, np.array([2.0]), np.array([0.0]), lr=0.5)
    # zero gradient leaves only the decay term: 2 - 0.5 * 0.1 * 2
    assert th[0] == pytest.approx(1.9)


def test_adam_is_deterministic():
    g = np.linspace(-1, 1, 7)
    out = [adam_step(AdamState.zeros(7), np.ones(7), g)[1] for _ in range(2)]
    assert out[0].tobytes() == out[1].tobytes()


def test_sam_perturbation_norm_and_zero_gradient():
    eps = sam_perturbation(np.array([3.0, 4.0]), 0.05)
    assert l2_norm(eps) == pytest.approx(0.05, abs=1e-15)
    assert sam_perturbation(np.zeros(3), 0.05) is None


def test_sam_step_uses_gradient_at_perturbed_point():
    # E(t) = t^4 / 4, grad t^3
    grad_fn = lambda t: (float(np.sum(t ** 4) / 4), t ** 3)
    theta = np.array([1.0])
    loss, new = sam_step(grad_fn, theta, 0.5, lambda th, g: sgd_step(th, g, 0.1))
    assert loss == 0.25
    assert new[0] == pytest.approx(1.0 - 0.1 * 1.5 ** 3)
    # vanishing gradient falls back to the plain step
    _, same = sam_step(grad_fn, np.zeros(1), 0.5, lambda th, g: sgd_step(th, g, 0.1))
    assert same[0] == 0.0
    with pytest.raises(ValueError):
        sam_step(grad_fn, theta, 0.0, lambda th, g: th)


def test_ema_matches_recurrence():
    rng = np.random.default_rng(1)
    xs = rng.standard_normal((50, 3))
    s = EmaState(xs[0].copy(), 0.99)
    ref = xs[0].copy()
    for x in xs[1:]:
        s = ema_update(s, x)
        ref = [0.99 * a + 0.01 * b for a, b in zip(ref, x)]
    np.testing.assert_allclose(s.shadow, ref, atol=1e-15)
    with pytest.raises(ValueError):
        EmaState(np.zeros(1), 1.0)


def test_lr_schedules():
    assert lr_at(LrSchedule(), 12345) == 1e-3
    cyc = LrSchedule("cyclic", 1.0, 5, 0.2)
    assert [lr_at(cyc, t) for t in range(6)] == pytest.approx([1.0, 0.8, 0.6, 0.4, 0.2, 1.0])
    assert lr_at(LrSchedule("cyclic", 1.0, 1, 0.5), 3) == 1.0
    with pytest.raises(ValueError):
        LrSchedule("cosine")
    with pytest.raises(ValueError):
        LrSchedule("cyclic", 1.0, 5, 2.0)
    with pytest.raises(ValueError):
        lr_at(cyc, -1)
