"""Тесты численных ядер"""
import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from jmstate.errors import NumericalError, RootBracketError, ValidationError
from jmstate.numerics import (BSplineBasis, StepFunctionMatrix, bspline_eval, brent_root,
                              gauss_hermite, gauss_kronrod, kronrod_rule, product_integral,
                              pseudo_adaptive_nodes)


@pytest.fixture
def cubic_basis():
    return BSplineBasis.from_breakpoints([0.0, 1.0, 2.5, 4.0, 6.0], degree=3)


def test_bspline_partition_of_unity(cubic_basis):
    assert cubic_basis.n_basis == 7
    t = np.linspace(0.0, 6.0, 41)
    values = cubic_basis.evaluate(t)
    assert values.shape == (41, 7)
    np.testing.assert_allclose(values.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(values >= -1e-14)


def test_bspline_eval_range(cubic_basis):
    np.testing.assert_allclose(bspline_eval(cubic_basis, 0.0), [1, 0, 0, 0, 0, 0, 0])
    with pytest.raises(ValidationError, match="outside knot range"):
        bspline_eval(cubic_basis, 7.0)
    np.testing.assert_allclose(bspline_eval(cubic_basis, 7.0, clamp=True), [0, 0, 0, 0, 0, 0, 1],
                               atol=1e-12)


def test_bspline_rejects_bad_knots():
    with pytest.raises(ValidationError):
        BSplineBasis(2, [0.0, 0.0, 1.0, 1.0, 1.0])
    with pytest.raises(ValidationError):
        BSplineBasis.from_breakpoints([0.0, 0.0], degree=1)


def test_gauss_hermite_moment():
    rule = gauss_hermite(5)
    assert rule.nodes.size == 5
    assert rule.weights @ rule.nodes ** 4 == pytest.approx(3 * math.sqrt(math.pi) / 4, rel=1e-12)
    with pytest.raises(ValidationError):
        gauss_hermite(0)


@pytest.mark.parametrize("mode, cov", [
    ([0.7], [[0.25]]),
    ([0.3, -1.2], [[0.5, 0.1], [0.1, 0.2]]),
])
def test_adaptive_nodes_integrate_gaussian(mode, cov):
    """Гауссова плотность с совпадающими центром и масштабом интегрируется точно"""
    cov = np.array(cov)
    grid = pseudo_adaptive_nodes(gauss_hermite(4), mode, np.linalg.cholesky(cov))
    density = np.atleast_1d(multivariate_normal(mode, cov).pdf(grid.nodes))
    assert grid.weights @ density == pytest.approx(1.0, rel=1e-10)


def test_adaptive_nodes_singular_scale():
    with pytest.raises(NumericalError):
        pseudo_adaptive_nodes(gauss_hermite(3), [0.0, 0.0], np.zeros((2, 2)))


def test_kronrod_exactness():
    value, _ = gauss_kronrod(lambda x: x ** 22, 0.0, 1.0, order=15)
    assert value == pytest.approx(1 / 23, rel=1e-12)
    value, _ = gauss_kronrod(lambda x: x ** 13, 0.0, 1.0, order=7)
    assert value == pytest.approx(1 / 14, rel=1e-12)


def test_kronrod_panels():
    value, error = gauss_kronrod(np.exp, 0.0, 2.0, panels=4)
    assert value == pytest.approx(math.exp(2.0) - 1.0, rel=1e-13)
    assert error < 1e-10
    nodes, weights = kronrod_rule(1.0, 3.0, panels=2)
    assert nodes.size == 30
    assert weights.sum() == pytest.approx(2.0)


def test_kronrod_bounds():
    assert gauss_kronrod(np.exp, 1.0, 1.0) == (0.0, 0.0)
    with pytest.raises(ValidationError):
        gauss_kronrod(np.exp, 2.0, 1.0)


def test_brent_root():
    assert brent_root(lambda x: x * x - 2.0, 0.0, 2.0, tol=1e-12) == pytest.approx(math.sqrt(2.0), abs=1e-10)
    assert brent_root(lambda x: x - 1.0, 1.0, 3.0) == 1.0
    with pytest.raises(RootBracketError):
        brent_root(lambda x: x * x + 1.0, -1.0, 1.0)


def _two_state_steps():
    increments = np.array([
        [[-0.2, 0.2], [0.0, 0.0]],
        [[-0.5, 0.5], [0.0, 0.0]],
        [[-0.25, 0.25], [0.0, 0.0]],
    ])
    return StepFunctionMatrix(np.array([1.0, 2.0, 3.0]), increments)


def test_step_function_window():
    steps = _two_state_steps()
    np.testing.assert_array_equal(steps.window(1.0, 3.0), [1, 2])
    np.testing.assert_array_equal(steps.window(0.0, 0.5), [])
    np.testing.assert_allclose(steps.cumulative(2.0), [[-0.7, 0.7], [0.0, 0.0]])


def test_product_integral_chapman_kolmogorov():
    steps = _two_state_steps()
    whole = product_integral(steps, 0.0, 3.0)
    assert whole[0, 0] == pytest.approx(0.8 * 0.5 * 0.75)
    np.testing.assert_allclose(whole, product_integral(steps, 0.0, 1.5) @ product_integral(steps, 1.5, 3.0))
    np.testing.assert_allclose(product_integral(steps, 2.0, 2.0), np.eye(2))
    with pytest.raises(ValidationError):
        product_integral(steps, 2.0, 1.0)


def test_product_integral_rejects_large_jump():
    steps = StepFunctionMatrix(np.array([1.0]), np.array([[[-1.5, 1.5], [0.0, 0.0]]]))
    with pytest.raises(NumericalError, match="below -1"):
        product_integral(steps, 0.0, 2.0)


def test_step_function_requires_increasing_times():
    with pytest.raises(ValidationError):
        StepFunctionMatrix(np.array([2.0, 1.0]), np.zeros((2, 2, 2)))
