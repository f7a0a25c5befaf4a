"""Тесты генератора совместных данных"""
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import kstest

from jmstate.errors import ConfigError
from jmstate.likelihood import IntensityFunction
from jmstate.msprep import upsilon_matrix
from jmstate.params import BaselineGroup
from jmstate.simulate import SimulationDesign, _event_time, reference_design, simulate_dataset
from quick_calibration import check_counts


def test_event_time_inverts_constant_hazard(constant_hazard):
    spec, params = constant_hazard
    intensity = IntensityFunction(spec, params, {}, [0.0])
    for u in (0.9, 0.5, 0.05):
        event, residual = _event_time(intensity, 0, 1.0, u, 100.0)
        assert event == pytest.approx(1.0 - math.log(u) / 0.2, abs=1e-8)
        assert residual < 1e-8


def test_event_time_beyond_horizon(constant_hazard):
    spec, params = constant_hazard
    intensity = IntensityFunction(spec, params, {}, [0.0])
    assert _event_time(intensity, 0, 0.0, 1e-12, 10.0) == (None, 0.0)


def test_simulation_is_deterministic():
    first, truth_first = simulate_dataset(reference_design(25, seed=5), threads=1)
    second, truth_second = simulate_dataset(reference_design(25, seed=5), threads=3)
    assert first.histories == second.histories
    assert first.longitudinal == second.longitudinal
    assert truth_first == truth_second
    other, _ = simulate_dataset(reference_design(25, seed=6))
    assert other.histories != first.histories


def test_simulated_sample(reference_sample):
    design, dataset, truth = reference_sample
    assert dataset.n_subjects == 80
    assert truth['max_inversion_residual'] < 1e-8
    assert truth['parameters']['beta[X]'] == 0.543
    for history in dataset.histories:
        records = dataset.records_for(history.id)
        assert records[-1].t <= history.times[0]
        assert records[0].covariates == truth['covariates'][history.id]
        assert history.times[-1] <= design.censoring[1]
    assert upsilon_matrix(dataset).sum() > dataset.n_subjects


def test_zero_hazard_keeps_everyone_in_entry_state():
    design = reference_design(30, seed=2)
    params = design.params.copy()
    params.spline_coefs = tuple(np.full_like(c, -np.inf) for c in params.spline_coefs)
    dataset, _ = simulate_dataset(replace(design, params=params))
    assert all(h.states == (0,) for h in dataset.histories)
    assert all(h.censor_time is not None for h in dataset.histories)


@pytest.mark.parametrize("censoring", [(0.0, 5.0), (6.0, 5.0)])
def test_bad_censoring_support(censoring):
    design = reference_design(10)
    with pytest.raises(ConfigError, match="censoring"):
        replace(design, censoring=censoring)


def test_unplaced_knots_rejected():
    design = reference_design(10)
    groups = tuple(BaselineGroup(g.transitions) for g in design.spec.baseline_groups)
    with pytest.raises(ConfigError, match="knots"):
        replace(design, spec=replace(design.spec, baseline_groups=groups))


@pytest.mark.slow
def test_transition_counts_calibration():
    dataset, _ = simulate_dataset(reference_design(1500, seed=0))
    results = check_counts(upsilon_matrix(dataset))
    assert all(r['success'] for r in results), results


@pytest.fixture
def constant_design(constant_hazard):
    spec, params = constant_hazard
    # цензура далеко за горизонтом событий
    return SimulationDesign(spec=spec, params=params, censoring=(1000.0, 1000.0), n_subjects=400, seed=5)


def _sojourns(design):
    dataset, _ = simulate_dataset(design)
    return np.array([h.times[0] for h in dataset.histories])


def test_constant_hazard_sojourns_are_exponential(constant_design):
    times = _sojourns(constant_design)
    assert times.size == 400
    assert kstest(times, 'expon', args=(0.0, 5.0)).pvalue > 0.001


def test_larger_coefficients_shorten_sojourns(constant_design):
    slow = _sojourns(constant_design)
    params = constant_design.params.copy()
    params.spline_coefs = tuple(c + 1.0 for c in params.spline_coefs)
    fast = _sojourns(replace(constant_design, params=params))
    assert np.median(fast) < np.median(slow)
    # те же равномерные величины: время сокращается ровно в e раз
    np.testing.assert_allclose(fast, slow * math.exp(-1.0), rtol=1e-8)
