import numpy as np
import pytest

from prevadapt.nets import (
    AdamOptimizer,
    ConfigurationError,
    LbfgsResult,
    LossSpec,
    MLPParams,
    NumericsError,
    SgdOptimizer,
    backward,
    init_mlp,
    lbfgs_minimize,
    lbfgs_minimize_params,
    mlp_forward,
    nll_loss,
    softmax,
)

from oracles import forward_reference, max_relative_grad_error, random_net_and_batch


def test_forward_identity_layer():
    params = MLPParams([np.eye(2)], [np.zeros(2)])
    out = mlp_forward(params, np.array([[1.0, 2.0]]))
    assert np.allclose(out, [[1.0, 2.0]])


def test_forward_constant_network():
    params = MLPParams([np.zeros((3, 2))], [np.array([0.5, -0.5])])
    out = mlp_forward(params, np.random.default_rng(0).standard_normal((4, 3)))
    assert np.allclose(out, np.tile([0.5, -0.5], (4, 1)))


def test_forward_matches_independent_reimplementation():
    rng = np.random.default_rng(0)
    params = init_mlp([3, 5, 4, 2], rng)
    batch = rng.standard_normal((6, 3))
    assert np.max(np.abs(mlp_forward(params, batch) - forward_reference(params, batch))) < 1e-12


def test_forward_dimension_mismatch():
    params = MLPParams([np.eye(2)], [np.zeros(2)])
    with pytest.raises(ConfigurationError):
        mlp_forward(params, np.zeros((1, 3)))


def test_softmax_symmetry():
    assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_analytic():
    assert np.allclose(softmax(np.log(np.array([1.0, 3.0]))), [0.25, 0.75])


def test_softmax_overflow_safe():
    assert np.allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])


def test_softmax_simplex_and_shift_invariance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        logits = rng.standard_normal(rng.integers(2, 6)) * rng.uniform(0.1, 50)
        p = softmax(logits)
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) < 1e-12
        shift = rng.standard_normal() * 100
        assert np.max(np.abs(softmax(logits + shift) - p)) < 1e-12


def test_nll_fifty_fifty():
    assert nll_loss(np.array([[0.5, 0.5]]), np.array([0])) == pytest.approx(np.log(2))


def test_nll_certain_prediction():
    assert nll_loss(np.array([[1.0, 0.0]]), np.array([0])) == 0.0


def test_nll_weighted():
    got = nll_loss(np.array([[0.25, 0.75]]), np.array([1]), weights=np.array([2.0]))
    assert got == pytest.approx(2 * -np.log(0.75))


def test_nll_empty_batch_errors():
    with pytest.raises(ValueError):
        nll_loss(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_nll_clamps_zero_probability():
    got = nll_loss(np.array([[0.0, 1.0]]), np.array([0]))
    assert got == pytest.approx(-np.log(1e-12))


def test_backward_linear_squared_loss_hand_calculus():
    # y = w * x with w=1, x=2, target 0: L = (wx)^2 = 4w^2, dL/dw = 8
    params = MLPParams([np.array([[1.0]])], [np.zeros(1)])
    loss, grads = backward(params, np.array([[2.0]]), LossSpec(targets=np.array([0.0]), kind="squared"))
    assert loss == pytest.approx(4.0)
    assert grads.weights[0][0, 0] == pytest.approx(8.0)


def test_backward_zero_weights_zero_gradient():
    rng = np.random.default_rng(2)
    params = init_mlp([3, 4, 2], rng)
    batch = rng.standard_normal((5, 3))
    spec = LossSpec(targets=np.array([0, 1, 0, 1, 0]), weights=np.zeros(5))
    loss, grads = backward(params, batch, spec)
    assert loss == 0.0
    assert np.all(grads.to_flat() == 0.0)


def test_backward_nonfinite_input_reports_index():
    params = MLPParams([np.eye(2)], [np.zeros(2)])
    batch = np.array([[0.0, 0.0], [np.nan, 0.0]])
    with pytest.raises(NumericsError, match="index 1"):
        backward(params, batch, LossSpec(targets=np.array([0, 0])))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        params, batch, spec = random_net_and_batch(rng)
        worst = max(worst, max_relative_grad_error(params, batch, spec))
    assert worst < 1e-5


def test_gradients_match_finite_differences_squared_loss():
    rng = np.random.default_rng(4)
    for _ in range(5):
        params, batch, spec = random_net_and_batch(rng, kind="squared")
        assert max_relative_grad_error(params, batch, spec) < 1e-5


def test_lbfgs_scalar_quadratic():
    res = lbfgs_minimize(lambda x: (float((x[0] - 3) ** 2), np.array([2 * (x[0] - 3)])), np.zeros(1))
    assert abs(res.x[0] - 3.0) < 1e-8
    assert res.converged


def test_lbfgs_already_optimal_returns_init():
    res = lbfgs_minimize(lambda x: (float((x[0] - 3) ** 2), np.array([2 * (x[0] - 3)])), np.array([3.0]))
    assert res.n_iter == 0
    assert res.converged
    assert res.x[0] == 3.0


def _rosenbrock(x: np.ndarray) -> tuple[float, np.ndarray]:
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return float(f), g


def test_lbfgs_rosenbrock():
    res = lbfgs_minimize(_rosenbrock, np.array([-1.2, 1.0]), max_iter=500)
    assert np.max(np.abs(res.x - 1.0)) < 1e-4
    _, g = _rosenbrock(res.x)
    assert np.max(np.abs(g)) < 1e-3


def test_lbfgs_monotone_over_accepted_steps():
    # values at the accepted iterates, observed by truncating the run at
    # every iteration budget in turn
    x0 = np.array([-1.2, 1.0])
    values = [lbfgs_minimize(_rosenbrock, x0, max_iter=k).fval for k in range(0, 30)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
    assert isinstance(lbfgs_minimize(_rosenbrock, x0, max_iter=5), LbfgsResult)


def test_lbfgs_params_wrapper_quadratic():
    target = np.array([[1.0, -2.0]])

    def objective(p: MLPParams):
        diff = p.weights[0] - target
        grads = MLPParams([2 * diff], [np.zeros(2)])
        return float(np.sum(diff * diff)), grads

    init = MLPParams([np.zeros((1, 2))], [np.zeros(2)])
    fitted, res = lbfgs_minimize_params(objective, init)
    assert np.max(np.abs(fitted.weights[0] - target)) < 1e-7
    assert res.converged


def test_adam_and_sgd_reduce_loss():
    rng = np.random.default_rng(5)
    batch = rng.standard_normal((64, 3))
    labels = (batch[:, 0] > 0).astype(int)
    for opt in (AdamOptimizer(lr=1e-2), SgdOptimizer(lr=0.5)):
        params = init_mlp([3, 8, 2], np.random.default_rng(6))
        loss0, _ = backward(params, batch, LossSpec(targets=labels))
        for _ in range(50):
            _, grads = backward(params, batch, LossSpec(targets=labels))
            opt.step(params, grads)
        loss1, _ = backward(params, batch, LossSpec(targets=labels))
        assert loss1 < loss0


def test_init_is_deterministic_given_seed():
    a = init_mlp([4, 7, 2], np.random.default_rng(11)).to_flat()
    b = init_mlp([4, 7, 2], np.random.default_rng(11)).to_flat()
    assert np.array_equal(a, b)


def test_flat_roundtrip():
    params = init_mlp([3, 5, 2], np.random.default_rng(7))
    again = params.from_flat(params.to_flat())
    assert np.array_equal(params.to_flat(), again.to_flat())
