import numpy as np
import pytest

from aquathru.lm import NumericFailure, levenberg_marquardt, multistart


def _line(x_data, y_data):
    def residual(p):
        return p[0] * x_data + p[1] - y_data

    def jacobian(p):
        return np.column_stack([x_data, np.ones_like(x_data)])

    return residual, jacobian


def test_linear_least_squares_matches_lstsq():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 5, 50)
    y = 1.7 * x - 0.4 + rng.normal(0, 0.1, 50)
    res = levenberg_marquardt(*_line(x, y), [0.0, 0.0], [-10, -10], [10, 10])
    ref = np.linalg.lstsq(np.column_stack([x, np.ones_like(x)]), y, rcond=None)[0]
    np.testing.assert_allclose(res.x, ref, atol=1e-8)
    assert res.converged


def test_bounds_are_respected():
    x = np.linspace(0, 1, 20)
    res = levenberg_marquardt(*_line(x, 3.0 * x), [0.0, 0.0], [0, -1], [1, 1])
    assert res.x[0] <= 1.0 and res.x[0] == pytest.approx(1.0)


def test_cost_history_decreases():
    z = np.linspace(0.5, 8, 40)
    v = 0.4 * (1 - np.exp(-0.3 * z))

    def residual(p):
        return p[0] * (1 - np.exp(-p[1] * z)) - v

    def jacobian(p):
        e = np.exp(-p[1] * z)
        return np.column_stack([1 - e, p[0] * z * e])

    res = levenberg_marquardt(residual, jacobian, [0.9, 4.0], [0, 0], [1, 10])
    assert np.all(np.diff(res.history) < 0)
    np.testing.assert_allclose(res.x, [0.4, 0.3], atol=1e-8)


def test_multistart_prefers_lowest_cost_and_is_deterministic():
    # residual with two local minima in x: (x^2 - 1)^2 plus a tilt
    def residual(p):
        return np.array([p[0] ** 2 - 1.0, 0.1 * (p[0] - 1.0)])

    def jacobian(p):
        return np.array([[2 * p[0]], [0.1]])

    a = multistart(residual, jacobian, [[-2.0], [2.0]], [-5], [5])
    b = multistart(residual, jacobian, [[-2.0], [2.0]], [-5], [5])
    assert a.x[0] == pytest.approx(1.0, abs=1e-6)
    assert a.x.tobytes() == b.x.tobytes()
    assert len(a.start_costs) == 2


def test_all_starts_diverge():
    def residual(p):
        return np.array([np.nan])

    def jacobian(p):
        return np.array([[1.0]])

    with pytest.raises(NumericFailure) as exc:
        multistart(residual, jacobian, [[0.0], [1.0]], [-1], [2])
    assert len(exc.value.trace) == 2
