import numpy as np
import pytest

from loopfit.optim import Adam, AdamState, NonFiniteGradientError, adam_step


def test_zero_gradient_only_decays_moments():
    state = AdamState(3, {"w": np.array([0.2])}, {"w": np.array([0.04])})
    params = {"w": np.array([1.5])}
    out, new = adam_step(state, params, {"w": np.zeros(1)}, lr=0.1)
    # the bias-corrected first moment is still non-zero, so check the moments explicitly
    np.testing.assert_allclose(new.m["w"], 0.9 * 0.2)
    np.testing.assert_allclose(new.v["w"], 0.999 * 0.04)
    fresh, _ = adam_step(AdamState(), params, {"w": np.zeros(1)}, lr=0.1)
    np.testing.assert_array_equal(fresh["w"], params["w"])


def test_constant_gradient_moves_against_it_with_bounded_steps():
    params, state = {"w": np.array([0.0, 0.0])}, AdamState()
    g = {"w": np.array([3.0, -0.01])}
    eps = 1e-8
    for _ in range(100):
        new, state = adam_step(state, params, g, lr=0.01, eps=eps)
        step = new["w"] - params["w"]
        assert (np.sign(step) == -np.sign(g["w"])).all()
        assert np.abs(step).max() <= 0.01 * (1 + eps)
        params = new


def test_quadratic_bowl_converges():
    target = np.array([0.3, -1.2, 2.0])
    opt = Adam(lr=0.05)
    params = {"x": np.zeros(3)}
    for _ in range(500):
        params = opt.step(params, {"x": 2 * (params["x"] - target)})
    assert np.abs(params["x"] - target).max() < 1e-6


def test_non_finite_gradient_names_the_block():
    with pytest.raises(NonFiniteGradientError) as err:
        adam_step(AdamState(), {"a": np.zeros(2), "b": np.zeros(2)}, {"a": np.zeros(2), "b": np.array([0, np.inf])}, 0.1)
    assert err.value.block == "b"


def test_per_block_rates_and_missing_blocks():
    params = {"a": np.zeros(1), "b": np.zeros(1), "c": np.ones(1)}
    out, _ = adam_step(AdamState(), params, {"a": np.ones(1), "b": np.ones(1)}, {"a": 0.1, "b": 0.01})
    np.testing.assert_allclose([out["a"][0], out["b"][0]], [-0.1, -0.01], rtol=1e-6)
    assert out["c"] is params["c"]


def test_deterministic():
    rng = np.random.default_rng(0)
    grads = [{"w": rng.normal(size=4)} for _ in range(20)]
    runs = []
    for _ in range(2):
        params, state = {"w": np.zeros(4)}, AdamState()
        for g in grads:
            params, state = adam_step(state, params, g, 0.01)
        runs.append(params["w"].tobytes())
    assert runs[0] == runs[1]


def test_rejects_bad_learning_rate():
    with pytest.raises(ValueError):
        Adam(lr=0.0)
