"""Тесты выражений дизайна и производных по времени"""
import numpy as np
import pytest

from jmstate.design import (DesignEvaluator, TimeBasis, derive_deriv_design, parse_term,
                            time_basis)
from jmstate.errors import ConfigError


def test_parse_term():
    assert parse_term("1") == ("1",)
    assert parse_term("1:X") == ("X",)
    assert parse_term(" time : X ") == ("time", "X")
    with pytest.raises(ConfigError):
        parse_term("time::X")


@pytest.mark.parametrize("basis", [
    time_basis("f", "f1", alpha=0.5),
    time_basis("g", "f2", nu=0.7),
    time_basis("time"),
])
def test_time_basis_derivative(basis):
    t = np.linspace(0.1, 6.0, 25)
    h = 1e-6
    numeric = (basis.value(t + h) - basis.value(t - h)) / (2 * h)
    np.testing.assert_allclose(basis.derivative(t), numeric, rtol=1e-6, atol=1e-8)


def test_f1_value():
    basis = time_basis("f", "f1", alpha=0.5)
    np.testing.assert_allclose(basis.value([0.0, 3.0]), [0.0, 1.0])


def test_derive_identity_basis():
    deriv = derive_deriv_design(("1", "X", "time", "time:X"), ("1", "time"), (TimeBasis("time"),))
    assert deriv.fixed == ("1", "X")
    assert deriv.ind_fixed == (2, 3)
    assert deriv.random == ("1",)
    assert deriv.ind_random == (1,)


def test_derive_nonlinear_basis():
    bases = (time_basis("f", "f2", nu=0.5),)
    deriv = derive_deriv_design(("1", "f", "f:X"), ("1", "f"), bases)
    assert deriv.fixed == ("f'", "f':X")
    assert deriv.ind_fixed == (1, 2)
    assert deriv.random == ("f'",)


def test_two_time_factors_rejected():
    bases = (TimeBasis("time"), time_basis("f", "f1", alpha=0.3))
    with pytest.raises(ConfigError):
        derive_deriv_design(("1", "time:f"), ("1",), bases)


def test_evaluator_columns():
    fixed = ("1", "X", "time", "time:X")
    random = ("1", "time")
    bases = (TimeBasis("time"),)
    evaluator = DesignEvaluator(fixed, random, bases, derive_deriv_design(fixed, random, bases))
    t = np.array([1.0, 2.0])
    covs = {'X': np.array([2.0, 2.0])}
    np.testing.assert_allclose(evaluator.fixed(t, covs), [[1, 2, 1, 2], [1, 2, 2, 4]])
    np.testing.assert_allclose(evaluator.dfixed(t, covs), [[0, 0, 1, 2], [0, 0, 1, 2]])
    np.testing.assert_allclose(evaluator.drandom(t, covs), [[0, 1], [0, 1]])
    assert evaluator.covariate_names() == ("X",)


def test_evaluator_without_derivative():
    evaluator = DesignEvaluator(("1", "time"), ("1",), (TimeBasis("time"),))
    with pytest.raises(ConfigError):
        evaluator.dfixed(np.array([1.0]), {})
