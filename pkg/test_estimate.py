"""Тесты оценивания и тестов Вальда"""
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chi2

from jmstate.diagnostics import conditional_residuals
from jmstate.errors import ValidationError
from jmstate.estimate import (FitControl, FitResult, contrast, covariance_from_information, e_step,
                              em_iteration, fit, load_fit, numerical_hessian, observed_information,
                              parameter_p_values, place_knots, random_effects_table, save_fit,
                              wald_test)
from jmstate.likelihood import build_workspaces, empirical_bayes_mode, refresh_modes, total_loglik
from jmstate.params import (BaselineGroup, ModelSpec, ParameterVector, SplineSpec, covariance_from_chol,
                            pack, zero_parameters)


def test_numerical_hessian_quadratic():
    A = np.array([[3.0, 1.0, 0.0], [1.0, 2.0, -0.5], [0.0, -0.5, 1.5]])
    b = np.array([0.3, -1.0, 2.0])
    theta = np.array([0.5, 2.0, -3.0])

    def func(x):
        return 0.5 * x @ A @ x + b @ x

    np.testing.assert_allclose(numerical_hessian(func, theta), A, atol=1e-4)
    np.testing.assert_allclose(numerical_hessian(None, theta, grad=lambda x: A @ x + b), A, atol=1e-8)


def test_covariance_from_information():
    vcov, flags = covariance_from_information(np.diag([4.0, 25.0]))
    np.testing.assert_allclose(vcov, np.diag([0.25, 0.04]))
    assert flags == []

    vcov, flags = covariance_from_information(np.diag([1.0, -2.0]))
    assert flags == ["hessian_not_psd"]
    assert np.all(np.linalg.eigvalsh(vcov) >= -1e-12)

    _, flags = covariance_from_information(np.zeros((2, 2)))
    assert "hessian_singular" in flags


def test_contrast_by_name(small_spec):
    layout = small_spec.layout
    matrix = contrast(small_spec, ["gamma[0->1|X]", {"eta_level[0->1]": 1.0, "eta_level[0->2]": -1.0}])
    assert matrix.shape == (2, layout.size)
    assert matrix[0, layout.slices['gamma'].start] == 1.0
    assert matrix[1, layout.index_of("eta_level[0->1]")] == 1.0
    assert matrix[1, layout.index_of("eta_level[0->2]")] == -1.0
    assert matrix.sum() == 1.0


def test_wald_test(small_spec, small_params, make_fit):
    result = make_fit(small_spec, small_params)
    statistic, dof, p_value = wald_test(result, contrast(result, ["beta[1]"]))
    assert statistic == pytest.approx(100.0)
    assert dof == 1
    assert p_value == pytest.approx(chi2.sf(100.0, 1))

    statistic, dof, _ = wald_test(result, contrast(result, ["eta_level[0->1]", "eta_level[1->2]"]),
                                  null=[0.3, 0.0])
    assert statistic == pytest.approx(0.4 ** 2 / 0.01)
    assert dof == 2


def test_wald_test_rejects_zero_rows(small_spec, small_params, make_fit):
    result = make_fit(small_spec, small_params)
    with pytest.raises(ValidationError, match="zero rows"):
        wald_test(result, np.zeros((2, small_spec.layout.size)))
    partial = contrast(result, ["beta[1]"])
    with pytest.raises(ValidationError, match="zero rows"):
        wald_test(result, np.vstack([partial, np.zeros_like(partial)]))
    with pytest.raises(ValidationError, match="null value"):
        wald_test(result, partial, null=[0.0, 1.0])
    with pytest.raises(ValidationError):
        wald_test(result, np.zeros((1, 3)))


def test_wald_test_with_identity_covariance():
    result = FitResult(spec=None, theta_hat=ParameterVector(np.array([1.0, 1.0]), ("a", "b")),
                       vcov=np.eye(2), loglik=0.0, se=np.ones(2), p_values=[None, None], convergence={})
    statistic, dof, p_value = wald_test(result, np.eye(2))
    assert statistic == pytest.approx(2.0)
    assert dof == 2
    assert p_value == pytest.approx(math.exp(-1.0), abs=1e-4)


def test_p_values_skip_variance_blocks(small_spec, small_params, make_fit):
    result = make_fit(small_spec, small_params)
    p_values = parameter_p_values(small_spec, result.theta_hat.values, result.se)
    layout = small_spec.layout
    assert p_values[layout.index_of("log_sigma")] is None
    assert p_values[layout.index_of("D_chol[1,1]")] is None
    assert p_values[layout.index_of("beta[1]")] == pytest.approx(2 * 7.6e-24, rel=0.1)


def test_random_effects_delta_method(truth_fit):
    rows = random_effects_table(truth_fit)
    assert [r['name'] for r in rows] == ["D[1,1]", "D[2,1]", "D[2,2]"]
    np.testing.assert_allclose([r['estimate'] for r in rows], [0.349, -0.041, 0.062])

    part = truth_fit.spec.layout.slices['d_chol']
    d_chol = truth_fit.theta_hat.values[part]
    h = 1e-6
    jacobian = np.zeros((3, 3))
    for j in range(3):
        step = np.zeros(3)
        step[j] = h
        upper = covariance_from_chol(d_chol + step)
        lower = covariance_from_chol(d_chol - step)
        jacobian[:, j] = [(upper[a, b] - lower[a, b]) / (2 * h) for a, b in ((0, 0), (1, 0), (1, 1))]
    expected = np.sqrt(np.diag(jacobian @ (0.01 * np.eye(3)) @ jacobian.T))
    np.testing.assert_allclose([r['se'] for r in rows], expected, rtol=1e-6)


def test_place_knots(toy_dataset, small_spec):
    placed = place_knots(toy_dataset, small_spec)
    assert [g.knots for g in placed.baseline_groups] == [(0.0, 2.0, 5.0), (0.0, 4.0, 5.0), (0.0, 2.5, 5.0)]


def test_em_is_monotone_on_fixed_grids(toy_dataset, small_spec, small_params):
    workspaces = build_workspaces(toy_dataset, small_spec)
    refresh_modes(small_params, workspaces, small_spec)
    params = small_params
    trace = [total_loglik(params, workspaces, small_spec)]
    for _ in range(4):
        params = em_iteration(params, workspaces, small_spec)
        trace.append(total_loglik(params, workspaces, small_spec))
    assert np.all(np.diff(trace) >= -1e-8)
    assert trace[-1] > trace[0]


@pytest.fixture(scope="module")
def short_fit(reference_sample):
    design, dataset, _ = reference_sample
    control = FitControl(gh_order=3, em_max=3, qn_max=15, hessian=False)
    return fit(dataset, design.spec, control)


def test_fit_improves_likelihood(short_fit):
    trace = short_fit.convergence['em_trace']
    assert np.all(np.diff(trace) >= -1e-6)
    assert math.isfinite(short_fit.loglik)
    assert short_fit.loglik >= trace[0]
    assert short_fit.convergence['phase'] in ("em", "qn")
    assert short_fit.settings['gh_order'] == 3
    assert short_fit.names == short_fit.spec.layout.names
    assert np.all(np.isnan(short_fit.vcov))


def test_save_and_load_fit(short_fit, tmp_path):
    path = tmp_path / "fit.json"
    document = save_fit(short_fit, path, {'seed': 11})
    assert document['config'] == {'seed': 11}
    loaded = load_fit(path)
    assert loaded.names == short_fit.names
    np.testing.assert_array_equal(loaded.theta_hat.values, short_fit.theta_hat.values)
    assert loaded.loglik == short_fit.loglik
    assert loaded.spec.layout.names == short_fit.spec.layout.names
    assert loaded.workspaces is None


def test_load_fit_rejects_garbage(tmp_path):
    path = tmp_path / "fit.json"
    path.write_text("{not json")
    with pytest.raises(ValidationError, match="cannot read fit document"):
        load_fit(path)


@pytest.mark.slow
def test_fit_standard_errors(reference_sample):
    design, dataset, _ = reference_sample
    result = fit(dataset, design.spec, FitControl(gh_order=5))
    assert np.all(np.isfinite(result.se))
    assert np.all(result.se > 0)
    assert "hessian_singular" not in result.flags


def test_em_covariance_update_is_posterior_second_moment(toy_dataset, small_spec, small_params):
    dataset = toy_dataset.subset(["1", "2"])
    workspaces = build_workspaces(dataset, small_spec)
    refresh_modes(small_params, workspaces, small_spec)
    posterior = e_step(small_params, workspaces, small_spec, small_spec.quadrature.gh_order)
    expected = sum((nodes * pi[:, None]).T @ nodes for nodes, pi in posterior) / 2.0
    updated = em_iteration(small_params, workspaces, small_spec)
    np.testing.assert_allclose(updated.D, expected, rtol=1e-10)


def test_observed_information_of_gaussian_mean(two_state_dataset):
    """Без случайных эффектов продольный блок равен информации выборки N(beta, sigma^2)"""
    spec = ModelSpec(topology=two_state_dataset.topology, fixed_design=("1",), random_design=(),
                     baseline_groups=(BaselineGroup(((0, 1),), (0.0, 100.0)),),
                     spline=SplineSpec(degree=1, internal_knots=0))
    params = zero_parameters(spec)
    params.beta = np.array([0.3])
    params.log_sigma = math.log(0.5)
    params.spline_coefs = (np.full(2, math.log(0.2)),)
    workspaces = build_workspaces(two_state_dataset, spec)
    refresh_modes(params, workspaces, spec)

    information = observed_information(pack(params, spec), workspaces, spec)
    layout = spec.layout
    b, s = layout.index_of("beta[1]"), layout.index_of("log_sigma")
    # шесть наблюдений y = 0, sigma = 0.5
    assert information[b, b] == pytest.approx(6 / 0.25, rel=1e-6)
    assert information[s, s] == pytest.approx(2 * 6 * 0.09 / 0.25, rel=1e-6)
    assert information[b, s] == pytest.approx(-2 * 6 * 0.3 / 0.25, rel=1e-6)
    spline = layout.slices['spline']
    np.testing.assert_allclose(information[b, spline], 0.0, atol=1e-8)


def test_fit_keeps_modes_at_the_estimate(short_fit, reference_sample):
    _, dataset, _ = reference_sample
    params = short_fit.params
    for ws in short_fit.workspaces:
        mode, _, _ = empirical_bayes_mode(params, ws, short_fit.spec)
        np.testing.assert_allclose(ws.mode, mode, atol=1e-6)

    rebuilt = conditional_residuals(replace(short_fit, workspaces=None), dataset)
    np.testing.assert_allclose(conditional_residuals(short_fit, dataset)['fitted'], rebuilt['fitted'],
                               atol=1e-6)
