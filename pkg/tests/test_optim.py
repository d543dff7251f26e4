import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ganseg.numerics import Adam, Linear, OptimizerState, SGDNesterov, adam_step, poly_lr, sgd_nesterov_step


def test_nesterov_hand_trace():
    state = OptimizerState(lr=0.1, momentum=0.9)
    p = {"w": np.array([1.0])}
    p, state = sgd_nesterov_step(p, {"w": np.array([0.5])}, state)
    # v = 0.5; p = 1 - 0.1 * (0.5 + 0.9 * 0.5)
    assert p["w"][0] == pytest.approx(0.905, abs=1e-15)
    p, state = sgd_nesterov_step(p, {"w": np.array([-0.25])}, state)
    # v = 0.45 - 0.25 = 0.2; p = 0.905 - 0.1 * (-0.25 + 0.18)
    assert p["w"][0] == pytest.approx(0.912, abs=1e-15)
    assert state.step == 2


def test_nesterov_weight_decay_folds_into_gradient():
    state = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.1)
    p, _ = sgd_nesterov_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, state)
    # g = 0.5 + 0.1 * 1 = 0.6; p = 1 - 0.1 * (0.6 + 0.54)
    assert p["w"][0] == pytest.approx(0.886, abs=1e-15)


def test_adam_hand_trace():
    state = OptimizerState(lr=1e-3, beta1=0.0, beta2=0.99, eps=1e-8)
    p, state = adam_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, state)
    # m_hat = 0.5, v_hat = 0.0025 / 0.01 = 0.25
    assert p["w"][0] == pytest.approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    p, state = adam_step(p, {"w": np.array([-0.25])}, state)
    v = 0.99 * 0.0025 + 0.01 * 0.0625
    v_hat = v / (1 - 0.99 ** 2)
    assert p["w"][0] == pytest.approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8) + 1e-3 * 0.25 / (np.sqrt(v_hat) + 1e-8),
                                      abs=1e-15)


def test_steps_are_pure():
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.1, -0.1])}
    state = OptimizerState(lr=0.1, momentum=0.9)
    sgd_nesterov_step(params, grads, state)
    adam_step(params, grads, state)
    np.testing.assert_array_equal(params["w"], [1.0, 2.0])
    assert state.step == 0 and state.buffers == {}


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        sgd_nesterov_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(lr=0.1))


def test_missing_gradient_leaves_parameter():
    out, _ = adam_step({"a": np.ones(2), "b": np.ones(2)}, {"a": np.ones(2)}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(out["b"], 1.0)


def test_module_wrappers_default_hyperparameters(rng):
    layer = Linear(3, 2, rng)
    sgd = SGDNesterov(layer)
    adam = Adam(layer)
    assert (sgd.state.lr, sgd.state.momentum, sgd.state.weight_decay) == (5e-2, 0.99, 3e-5)
    assert (adam.state.lr, adam.state.beta1, adam.state.beta2, adam.state.eps) == (1e-3, 0.0, 0.99, 1e-8)


def test_module_wrapper_updates_in_place(rng):
    layer = Linear(3, 2, rng)
    before = {k: v.copy() for k, v in layer.state_dict().items()}
    for p in layer.parameters():
        p.grad = np.ones_like(p.data)
    SGDNesterov(layer, lr=0.1, momentum=0.0, weight_decay=0.0).step()
    for k, v in layer.state_dict().items():
        np.testing.assert_allclose(v, before[k] - 0.1, rtol=1e-6)


def test_poly_lr_values():
    assert poly_lr(0, 100, 0.05) == 0.05
    assert poly_lr(50, 100, 0.05) == pytest.approx(0.05 * 0.5 ** 0.9, rel=1e-15)
    assert poly_lr(100, 100, 0.05) == 0.0
    assert poly_lr(5, 0, 0.05) == 0.0


@given(st.integers(1, 5000), st.floats(1e-4, 1.0))
def test_poly_lr_non_increasing(total, lr0):
    seq = [poly_lr(t, total, lr0) for t in range(0, total + 1, max(1, total // 50))]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    assert all(0.0 <= v <= lr0 for v in seq)


def test_nesterov_reference_cases():
    p = {"w": np.array([1.0])}
    out, _ = sgd_nesterov_step(p, {"w": np.array([0.5])}, OptimizerState(lr=0.1))
    assert out["w"][0] == pytest.approx(0.95, abs=1e-15)
    out, _ = sgd_nesterov_step(p, {"w": np.array([7.0])}, OptimizerState(lr=0.0, momentum=0.99))
    assert out["w"][0] == 1.0


def test_nesterov_two_steps_with_decay():
    mu, wd, lr = 0.99, 3e-5, 5e-2
    state = OptimizerState(lr=lr, momentum=mu, weight_decay=wd)
    p = {"w": np.array([2.0])}
    grads = [0.3, -0.1]
    # independent trace
    w, v = 2.0, 0.0
    for g in grads:
        g_eff = g + wd * w
        v = mu * v + g_eff
        w = w - lr * (g_eff + mu * v)
    for g in grads:
        p, state = sgd_nesterov_step(p, {"w": np.array([g])}, state)
    assert abs(p["w"][0] - w) < 1e-12


def test_adam_first_step_cases():
    state = OptimizerState(lr=1e-3)
    out, _ = adam_step({"w": np.array([1.0])}, {"w": np.array([0.0])}, state)
    assert out["w"][0] == 1.0
    out, _ = adam_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, state)
    assert 1.0 - out["w"][0] == pytest.approx(1e-3, rel=1e-6)


def test_poly_lr_reference_values():
    assert poly_lr(0, 100, 5e-2) == 5e-2
    assert poly_lr(100, 100, 5e-2) == 0.0
    assert poly_lr(50, 100, 5e-2, 0.9) == pytest.approx(2.679e-2, abs=1e-5)
