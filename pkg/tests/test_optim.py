import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from callpipe.nn import ModelSpec, Parameter, backward, build_model, forward, softmax_cross_entropy
from callpipe.optim import (OptimError, OptimState, adam_step, make_state, scheduler_step, set_trainable, sgd_step,
                            state_from_arrays, state_to_arrays, step)


def param(value, name="w"):
    p = Parameter(np.array(value, dtype=np.float64), name, dtype=np.float64)
    return p


def with_grad(p, g):
    p.grad = np.array(g, dtype=np.float64)
    return p


def test_adam_first_step():
    p = with_grad(param([0.0]), [1.0])
    s = OptimState("adam", 0.001, 0.001)
    adam_step([p], s)
    assert p.data[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert p.data[0] == pytest.approx(-0.00099999999, abs=1e-13)
    assert s.step_count == 1


def test_adam_first_step_scale_invariant(rng):
    g = rng.standard_normal(5)
    a, b = with_grad(param(np.zeros(5)), g), with_grad(param(np.zeros(5)), 10 * g)
    adam_step([a], OptimState("adam", 0.001, 0.001))
    adam_step([b], OptimState("adam", 0.001, 0.001))
    assert np.max(np.abs(a.data - b.data)) < 1e-9


def test_sgd_examples():
    p = with_grad(param([1.0]), [2.0])
    sgd_step([p], OptimState("sgd", 0.1, 0.1, momentum=0.0))
    assert p.data[0] == pytest.approx(0.8)
    p = param([0.0])
    s = OptimState("sgd", 0.1, 0.1, momentum=0.9)
    seen = []
    for _ in range(2):
        with_grad(p, [1.0])
        sgd_step([p], s)
        seen.append(p.data[0])
    assert seen == pytest.approx([-0.1, -0.29])


@pytest.mark.parametrize("kind", ["adam", "sgd"])
def test_zero_grad_fresh_state_is_noop(kind, rng):
    p = with_grad(param(rng.standard_normal(4)), np.zeros(4))
    before = p.data.copy()
    step([p], OptimState(kind, 0.01, 0.01))
    assert np.array_equal(p.data, before)


def test_sgd_zero_grad_with_zero_buffer_after_steps():
    p = param([0.5])
    s = OptimState("sgd", 0.1, 0.1, momentum=0.9)
    with_grad(p, [0.0])
    for _ in range(3):
        sgd_step([p], s)
    assert p.data[0] == 0.5


def test_missing_gradient_names_parameter():
    p = param([1.0], "features.w")
    with pytest.raises(OptimError, match="features.w"):
        adam_step([p], OptimState("adam", 0.1, 0.1))


def test_frozen_parameters_untouched():
    live = with_grad(param([1.0], "a"), [1.0])
    frozen = param([1.0], "b")
    frozen.trainable = False
    sgd_step([live, frozen], OptimState("sgd", 0.1, 0.1, momentum=0.0))
    assert frozen.data[0] == 1.0 and live.data[0] == pytest.approx(0.9)


def test_scheduler():
    s = OptimState("adam", 0.001, 0.001, gamma=0.995)
    assert scheduler_step(s, 0) == 0.001
    assert scheduler_step(s, 2) == pytest.approx(0.001 * 0.995 ** 2, rel=1e-15)
    assert s.lr == pytest.approx(0.00099002500)
    flat = OptimState("sgd", 0.1, 0.1, gamma=1.0)
    assert [scheduler_step(flat, e) for e in range(5)] == [0.1] * 5


def test_make_state_from_config():
    s = make_state({"optimizer": {"name": "sgd", "lr": 0.01, "momentum": 0.5}, "scheduler": {"gamma": 0.99}})
    assert (s.kind, s.lr, s.momentum, s.gamma) == ("sgd", 0.01, 0.5, 0.99)
    with pytest.raises(OptimError):
        make_state({"optimizer": {"name": "lbfgs"}})


def test_state_array_round_trip(rng):
    p = with_grad(param(rng.standard_normal(3)), rng.standard_normal(3))
    s = OptimState("adam", 0.01, 0.01)
    adam_step([p], s)
    header, arrays = state_to_arrays(s)
    back = state_from_arrays(header, arrays)
    assert back.step_count == 1
    assert np.array_equal(back.slots["w"]["m"], s.slots["w"]["m"])


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["adam", "sgd"]), st.integers(1, 6), st.integers(0, 10_000))
def test_step_count_increments(kind, n, seed):
    rng = np.random.default_rng(seed)
    p = param(rng.standard_normal(3))
    s = OptimState(kind, 0.01, 0.01)
    for i in range(n):
        with_grad(p, rng.standard_normal(3))
        step([p], s)
        assert s.step_count == i + 1
        assert s.slots["w"][("m" if kind == "adam" else "velocity")].shape == p.shape


def small_cnn():
    return build_model(ModelSpec("cnn_small", 2, (1, 8, 8), width=2, hidden=4), seed=0)


def test_set_trainable_modes():
    m = set_trainable(small_cnn(), "head-only")
    live = [n for n, p in m.named_parameters() if p.trainable]
    assert live == ["head.linear.weight", "head.linear.bias"]
    set_trainable(m, "all")
    assert all(p.trainable for p in m.parameters())
    with pytest.raises(OptimError):
        set_trainable(m, "backbone")


def test_head_only_training_freezes_backbone(rng):
    m = set_trainable(small_cnn(), "head-only")
    before = m.state_dict()
    s = OptimState("adam", 0.01, 0.01)
    x = rng.standard_normal((4, 1, 8, 8))
    for _ in range(5):
        for p in m.parameters():
            p.grad = None
        loss = softmax_cross_entropy(forward(m, x, "train"), [0, 1, 0, 1])
        backward(loss)
        adam_step(m.parameters(), s)
    after = m.state_dict()
    for name, p in m.named_parameters():
        same = np.array_equal(before[name], after[name])
        assert same != name.startswith("head."), name
