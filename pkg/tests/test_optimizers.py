import math

import numpy as np
import pytest

from autodiff import Tensor
from errors import NumericError, ShapeError
from optimizers import AdamState, EmaState, adam_step, ema_applied, ema_update


def test_adam_matches_scalar_recurrence():
    grads = [0.5, -0.2, 0.1, 3.0]
    p = {"w": Tensor([1.0])}
    state = AdamState(lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8)

    value, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adam_step(state, p, {"w": np.array([g])})
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        value -= 1e-3 * (m / (1 - 0.5 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"].data[0] == pytest.approx(value, abs=1e-12)
    assert state.t == len(grads)


def test_adam_first_step_moves_by_learning_rate():
    p = {"w": Tensor([0.0, 0.0])}
    adam_step(AdamState(lr=0.01), p, {"w": np.array([2.0, -5.0])})
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01], rtol=1e-6)


def test_adam_zero_gradient_leaves_parameters_unchanged():
    before = np.array([0.3, -1.2])
    p = {"w": Tensor(before.copy())}
    adam_step(AdamState(), p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"].data, before)


def test_adam_does_not_mutate_parameter_arrays_in_place():
    data = np.array([1.0])
    p = {"w": Tensor(data)}
    adam_step(AdamState(), p, {"w": np.array([1.0])})
    assert data[0] == 1.0
    assert p["w"].data is not data


def test_adam_rejects_bad_gradients():
    p = {"w": Tensor([1.0, 2.0])}
    state = AdamState()
    with pytest.raises(NumericError, match="w"):
        adam_step(state, p, {"w": np.array([np.nan, 0.0])})
    with pytest.raises(ShapeError):
        adam_step(state, p, {"w": np.array([1.0])})
    assert state.t == 0


def test_adam_state_arrays_reload():
    p = {"a": Tensor([1.0]), "b": Tensor([[1.0, 2.0]])}
    state = AdamState()
    adam_step(state, p, {"a": np.array([0.5]), "b": np.array([[1.0, -1.0]])})
    arrays = state.state_arrays("opt")
    restored = AdamState()
    restored.load_arrays("opt", arrays, ["a", "b"])
    assert restored.t == 1
    np.testing.assert_array_equal(restored.m["b"], state.m["b"])
    np.testing.assert_array_equal(restored.v["a"], state.v["a"])


def test_ema_matches_scalar_recurrence():
    p = {"w": Tensor([2.0])}
    ema = EmaState.track(p, momentum=0.998)
    shadow = 2.0
    for value in [1.0, 0.5, -3.0]:
        p["w"].data = np.array([value])
        ema_update(ema, p)
        shadow = 0.998 * shadow + 0.002 * value
        assert ema.shadow["w"][0] == pytest.approx(shadow, abs=1e-12)


def test_ema_tracks_a_copy():
    p = {"w": Tensor([1.0])}
    ema = EmaState.track(p)
    p["w"].data[0] = 5.0
    assert ema.shadow["w"][0] == 1.0


def test_ema_shape_mismatch():
    ema = EmaState(shadow={"w": np.zeros(2)})
    with pytest.raises(ShapeError):
        ema_update(ema, {"w": Tensor([1.0])})


def test_ema_applied_swaps_and_restores():
    live = np.array([1.0, 2.0])
    p = {"w": Tensor(live)}
    ema = EmaState(shadow={"w": np.array([9.0, 9.0])})
    with ema_applied(ema, p):
        np.testing.assert_array_equal(p["w"].data, [9.0, 9.0])
    assert p["w"].data is live

    with pytest.raises(RuntimeError):
        with ema_applied(ema, p):
            raise RuntimeError("boom")
    assert p["w"].data is live


def test_adam_minimizing_square_matches_oracle():
    p = {"w": Tensor([1.0])}
    state = AdamState()
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        g = 2.0 * w
        adam_step(state, p, {"w": np.array([2.0 * p["w"].data[0]])})
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 1e-3 * (m / (1 - 0.5 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"].data[0] == pytest.approx(w, abs=1e-12)
    assert w < 1.0


def test_ema_single_update_and_fixed_point():
    p = {"w": Tensor([1.0])}
    ema = EmaState(momentum=0.998, shadow={"w": np.array([0.0])})
    ema_update(ema, p)
    assert ema.shadow["w"][0] == pytest.approx(0.002, abs=1e-15)

    steady = EmaState.track(p)
    for _ in range(5):
        ema_update(steady, p)
    assert steady.shadow["w"][0] == 1.0


def test_ema_hundred_step_sequence():
    rng = np.random.default_rng(0)
    p = {"w": Tensor(np.zeros(3))}
    ema = EmaState.track(p)
    shadow = np.zeros(3)
    for _ in range(100):
        values = rng.normal(size=3)
        p["w"].data = values
        ema_update(ema, p)
        shadow = [0.998 * s + 0.002 * x for s, x in zip(shadow, values)]
    np.testing.assert_allclose(ema.shadow["w"], shadow, rtol=0, atol=1e-12)
