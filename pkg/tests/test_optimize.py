import numpy as np
import pytest

from flowgrad.errors import (
    ContractError,
    LineSearchError,
    NewtonDivergedError,
    NumericError,
)
from flowgrad.optimize import OptimizerConfig, lbfgs_optimize


def quadratic(center):
    def f(x):
        d = x - center
        return float(d @ d), 2.0 * d
    return f


def rosenbrock(x):
    a, b = x
    f = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    g = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                  200.0 * (b - a * a)])
    return f, g


def test_quadratic_converges_quickly():
    center = np.array([1.0, -2.0, 3.0, 0.5])
    res = lbfgs_optimize(quadratic(center), np.zeros(4))
    assert res.converged
    assert res.n_steps <= 25
    assert res.projected_grad_norm < 1e-10
    assert np.allclose(res.theta, center, atol=1e-9)


def test_rosenbrock_standard_start():
    res = lbfgs_optimize(rosenbrock, np.array([-1.2, 1.0]))
    assert res.loss < 1e-8
    assert np.allclose(res.theta, [1.0, 1.0], atol=1e-3)


def test_loss_history_monotone_and_sized():
    res = lbfgs_optimize(rosenbrock, np.array([-1.2, 1.0]))
    hist = res.loss_history
    assert len(hist) == res.n_steps
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert hist[0] <= res.initial_loss


def test_bound_constraint_projects_to_boundary():
    # unconstrained minimum of (x+1)^2 sits at -1, outside x >= 0
    def f(x):
        return float((x[0] + 1.0) ** 2), np.array([2.0 * (x[0] + 1.0)])

    res = lbfgs_optimize(f, np.array([5.0]),
                         OptimizerConfig(lower_bounds=0.0))
    assert res.converged
    assert abs(res.theta[0]) < 1e-12


def test_bound_constraint_vector():
    center = np.array([-1.0, 2.0, 0.5])
    lo = np.array([0.0, -np.inf, -np.inf])
    res = lbfgs_optimize(quadratic(center), np.ones(3),
                         OptimizerConfig(lower_bounds=lo))
    assert abs(res.theta[0]) < 1e-10
    assert np.allclose(res.theta[1:], center[1:], atol=1e-9)


def test_start_at_optimum_returns_zero_steps():
    center = np.array([2.0, 2.0])
    res = lbfgs_optimize(quadratic(center), center.copy())
    assert res.converged and res.n_steps == 0
    assert res.loss_history == []


def test_solver_failures_are_rejected_then_recovered():
    # the solver "diverges" below 0.05; the first trial from 1.0 lands there,
    # gets rejected, and the halved step recovers toward the minimum at 0.1
    calls = {"failed": 0}

    def f(x):
        if x[0] < 0.05:
            calls["failed"] += 1
            raise NewtonDivergedError("diverged", last_residual=1.0, iterations=10)
        d = x[0] - 0.1
        return float(d * d), np.array([2.0 * d])

    res = lbfgs_optimize(f, np.array([1.0]))
    assert res.converged
    assert abs(res.theta[0] - 0.1) < 1e-9
    assert calls["failed"] >= 1
    assert res.rejections == calls["failed"]


def test_twenty_rejections_raise_line_search_error():
    # only the starting point is evaluable, so every trial is rejected
    def f(x):
        if x[0] == 0.0:
            return 1.0, np.array([1.0])
        raise NewtonDivergedError("diverged")

    with pytest.raises(LineSearchError) as err:
        lbfgs_optimize(f, np.array([0.0]))
    assert err.value.diagnostics["rejections"] == 20


def test_non_finite_start_rejected():
    def f(x):
        return np.nan, np.zeros(1)

    with pytest.raises(NumericError):
        lbfgs_optimize(f, np.zeros(1))


def test_config_validation():
    with pytest.raises(ContractError):
        OptimizerConfig(c1=0.5, c2=0.1)
    with pytest.raises(ContractError):
        OptimizerConfig(max_steps=0)
    with pytest.raises(ContractError):
        lbfgs_optimize(quadratic(np.zeros(2)), np.zeros(2),
                       OptimizerConfig(lower_bounds=np.zeros(3)))


def test_gradient_shape_mismatch_rejected():
    def f(x):
        return float(x @ x), np.zeros(x.size + 1)

    with pytest.raises(ContractError):
        lbfgs_optimize(f, np.zeros(3))


def test_callback_sees_every_accepted_step():
    seen = []
    res = lbfgs_optimize(rosenbrock, np.array([-1.2, 1.0]),
                         callback=lambda k, x, f, g: seen.append((k, f)))
    assert [k for k, _ in seen] == list(range(1, res.n_steps + 1))
    assert [f for _, f in seen] == res.loss_history


def test_debug_fd_check_accepts_true_gradient():
    res = lbfgs_optimize(quadratic(np.array([1.0, 2.0])), np.zeros(2),
                         OptimizerConfig(debug_fd_check=True))
    assert res.converged


def test_debug_fd_check_catches_wrong_gradient():
    def f(x):
        d = x - 3.0
        return float(d @ d), 3.5 * d  # wrong scale

    with pytest.raises(NumericError, match="spot check"):
        lbfgs_optimize(f, np.zeros(4), OptimizerConfig(debug_fd_check=True))


def test_max_steps_respected():
    res = lbfgs_optimize(rosenbrock, np.array([-1.2, 1.0]),
                         OptimizerConfig(max_steps=3))
    assert res.n_steps == 3
    assert not res.converged


def test_deterministic_trajectory():
    a = lbfgs_optimize(rosenbrock, np.array([-1.2, 1.0]))
    b = lbfgs_optimize(rosenbrock, np.array([-1.2, 1.0]))
    assert a.loss_history == b.loss_history
    assert np.array_equal(a.theta, b.theta)
