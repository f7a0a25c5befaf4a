"""Общие фикстуры тестов"""
import os

import numpy as np
import pytest

os.environ.setdefault('JMSTATE_TESTING', '1')

from jmstate.design import TimeBasis, derive_deriv_design  # noqa: E402
from jmstate.estimate import FitResult  # noqa: E402
from jmstate.models import (LongitudinalRecord, SubjectHistory, TransitionTopology,  # noqa: E402
                            validate_dataset)
from jmstate.params import (BaselineGroup, ModelParameters, ModelSpec, SharedCovariate,  # noqa: E402
                            SplineSpec, chol_from_covariance, pack)
from jmstate.simulate import reference_design, simulate_dataset  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long simulation studies")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long simulation studies, run with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def illness_death():
    return TransitionTopology.illness_death()


@pytest.fixture
def toy_histories():
    return [
        SubjectHistory.from_events("1", [0.0, 2.0, 5.0], [0, 1, 2]),
        SubjectHistory.from_events("2", [0.0, 3.0], [0, 0]),
        SubjectHistory.from_events("3", [0.0, 4.0], [0, 2]),
    ]


@pytest.fixture
def toy_records():
    rows = [
        ("1", 0.0, 1.1, 0.5), ("1", 1.0, 1.4, 0.5), ("1", 2.0, 1.9, 0.5),
        ("2", 0.0, 0.7, -1.0), ("2", 1.5, 0.9, -1.0), ("2", 3.0, 1.3, -1.0),
        ("3", 0.0, 2.0, 1.5), ("3", 2.0, 2.6, 1.5), ("3", 4.0, 3.1, 1.5),
    ]
    return [LongitudinalRecord(i, t, y, {'X': x}) for i, t, y, x in rows]


@pytest.fixture
def toy_dataset(toy_records, toy_histories, illness_death):
    return validate_dataset(toy_records, toy_histories, illness_death, ("X",))


@pytest.fixture
def small_spec(illness_death):
    """Уровень маркера на всех переходах, общий коэффициент X на выходах из 0"""
    fixed = ("1", "time", "X")
    random = ("1",)
    bases = (TimeBasis("time"),)
    knots = (0.0, 2.5, 5.0)
    return ModelSpec(
        topology=illness_death,
        fixed_design=fixed,
        random_design=random,
        time_basis=bases,
        deriv_design=derive_deriv_design(fixed, random, bases),
        per_transition_covariates=(SharedCovariate("X", ((0, 1), (0, 2))),),
        dependence_form={pair: "level" for pair in illness_death.allowed},
        baseline_groups=tuple(BaselineGroup((pair,), knots) for pair in illness_death.allowed),
        spline=SplineSpec(degree=2, internal_knots=1),
    )


@pytest.fixture
def small_params():
    return ModelParameters(
        beta=np.array([1.0, 0.2, 0.5]),
        log_sigma=np.log(0.4),
        d_chol=chol_from_covariance(np.array([[0.3]])),
        gamma=np.array([0.2]),
        zeta=np.zeros(0),
        eta=np.array([0.3, -0.2, 0.4]),
        spline_coefs=(np.array([-2.0, -1.8, -2.2, -2.0]),
                      np.array([-3.0, -2.9, -2.7, -2.5]),
                      np.array([-1.5, -1.4, -1.2, -1.0])),
    )


@pytest.fixture(scope="session")
def reference_sample():
    """Небольшая выборка эталонной схемы: (дизайн, данные, истинные значения)"""
    design = reference_design(n_subjects=80, seed=11)
    dataset, truth = simulate_dataset(design)
    return design, dataset, truth


def fit_at(spec, params, workspaces=None):
    """FitResult с заданными значениями без оптимизации"""
    vector = pack(params, spec)
    n = vector.values.size
    return FitResult(spec=spec, theta_hat=vector, vcov=np.eye(n) * 0.01, loglik=0.0,
                     se=np.full(n, 0.1), p_values=[None] * n, convergence={'phase': "truth"},
                     workspaces=workspaces)


@pytest.fixture(scope="session")
def truth_fit(reference_sample):
    design, _, _ = reference_sample
    return fit_at(design.spec, design.params)


@pytest.fixture
def make_fit():
    return fit_at


@pytest.fixture
def constant_hazard():
    """Два состояния, постоянная интенсивность 0.2 без связи с маркером"""
    topology = TransitionTopology(2, ((0, 1),))
    spec = ModelSpec(topology=topology, fixed_design=("1",), random_design=("1",),
                     baseline_groups=(BaselineGroup(((0, 1),), (0.0, 100.0)),),
                     spline=SplineSpec(degree=1, internal_knots=0))
    params = ModelParameters(beta=np.zeros(1), log_sigma=0.0, d_chol=np.zeros(1), gamma=np.zeros(0),
                             zeta=np.zeros(0), eta=np.zeros(0),
                             spline_coefs=(np.full(2, np.log(0.2)),))
    return spec, params


@pytest.fixture
def two_state_dataset():
    """Выживание: события в 1, 2, 2, 3; цензурирование в 2.5 и 4"""
    topology = TransitionTopology(2, ((0, 1),))
    rows = [("1", 1.0, 1), ("2", 2.0, 1), ("3", 2.0, 1), ("4", 2.5, 0), ("5", 3.0, 1), ("6", 4.0, 0)]
    histories = [SubjectHistory.from_events(i, [0.0, t], [0, state]) for i, t, state in rows]
    records = [LongitudinalRecord(i, 0.0, 0.0) for i, _, _ in rows]
    return validate_dataset(records, histories, topology)
