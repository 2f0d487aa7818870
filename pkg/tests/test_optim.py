import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promptlab import autodiff as ad
from promptlab.autodiff import Tape, Tensor, backpropagate
from promptlab.optim import AdamW, AdamWConfig, OptimizerState, ParamGroup, adamw_step, zero_grads


def zeroed(*shapes, seed=0):
    rng = np.random.default_rng(seed)
    ts = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    for t in ts:
        t.zero_grad()
    return ts


def test_zero_grads_without_decay_leave_params_bit_identical():
    (p,) = zeroed((4, 3))
    before = p.data.copy()
    state = OptimizerState()
    for _ in range(10):
        adamw_step([ParamGroup([p], 0.01, 0.0)], state)
    assert p.data.tobytes() == before.tobytes()


def test_decoupled_decay_closed_form():
    (p,) = zeroed((5,))
    before = p.data.copy()
    state = OptimizerState()
    for _ in range(10):
        adamw_step([ParamGroup([p], 0.01, 1e-5)], state)
    np.testing.assert_allclose(p.data, before * (1 - 1e-7) ** 10, rtol=0, atol=1e-12)


def test_quadratic_converges():
    theta = Tensor([0.0], requires_grad=True)
    opt = AdamW([ParamGroup([theta], 0.1, 0.0)], AdamWConfig(lr=0.1))
    for _ in range(500):
        opt.zero_grad()
        with Tape() as tape:
            d = ad.sub(theta, Tensor([3.0]))
            backpropagate(ad.sum_all(ad.mul(d, d)), tape)
        opt.step()
    assert abs(theta.data[0] - 3.0) < 1e-3


def test_matches_reference_adam_without_decay():
    # the update for wd == 0 is exactly Adam, written out by hand
    rng = np.random.default_rng(1)
    p = Tensor(rng.normal(size=6), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    state = OptimizerState()
    for t in range(1, 8):
        g = rng.normal(size=6)
        p.grad = g.copy()
        adamw_step([ParamGroup([p], 0.05, 0.0)], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13, atol=1e-15)


def test_missing_grad_counts_as_zero():
    p = Tensor(np.ones(3), requires_grad=True)
    adamw_step([ParamGroup([p], 0.1, 0.0)], OptimizerState())
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_nan_gradient_names_tensor():
    p = Tensor(np.ones(3), requires_grad=True, name="coef7")
    p.grad = np.array([0.0, np.nan, 1.0])
    with pytest.raises(FloatingPointError, match="coef7"):
        adamw_step([ParamGroup([p], 0.1, 0.0)], OptimizerState())


def test_gradient_clipping_caps_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([30.0, 40.0])
    state = OptimizerState()
    adamw_step([ParamGroup([a], 0.1, 0.0)], state, max_grad_norm=1.0)
    np.testing.assert_allclose(state.exp_avg[0][0], 0.1 * np.array([0.6, 0.8]), rtol=1e-10)


def test_step_counter_and_moment_shapes():
    a, b = zeroed((2, 3), (4,))
    state = OptimizerState()
    for i in range(3):
        adamw_step([ParamGroup([a], 0.1, 0.0), ParamGroup([b], 0.1, 0.1)], state)
        assert state.step == i + 1
    assert state.exp_avg[0][0].shape == (2, 3) and state.exp_avg_sq[1][0].shape == (4,)


def test_state_round_trip():
    (p,) = zeroed((3,))
    p.grad = np.array([1.0, -2.0, 0.5])
    state = OptimizerState()
    adamw_step([ParamGroup([p], 0.1, 0.0)], state)
    back = OptimizerState.from_dict(state.to_dict())
    assert back.step == 1
    np.testing.assert_array_equal(back.exp_avg[0][0], state.exp_avg[0][0])


@pytest.mark.parametrize("kwargs", [dict(lr=0.0), dict(beta1=1.0), dict(eps=0.0), dict(weight_decay=-1.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AdamWConfig(**kwargs)


def test_zero_grads_contract():
    a, b = zeroed((2,), (3, 3))
    a.grad = np.array([1.0, 2.0])
    data = b.data.copy()
    zero_grads([a, b])
    zero_grads([a, b])
    assert np.linalg.norm(a.grad) == 0 and a.grad.shape == (2,)
    assert b.data.tobytes() == data.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0))
def test_step_is_deterministic(seed, lr):
    rng = np.random.default_rng(seed)
    init, grads = rng.normal(size=4), rng.normal(size=(3, 4))
    outs = []
    for _ in range(2):
        p = Tensor(init.copy(), requires_grad=True)
        state = OptimizerState()
        for g in grads:
            p.grad = g.copy()
            adamw_step([ParamGroup([p], lr, 0.01)], state)
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]
