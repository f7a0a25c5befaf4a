# Генерация совместных данных обращением кумулятивной интенсивности
import math
from dataclasses import dataclass, field

import numpy as np

from jmstate import log_action
from jmstate.design import TimeBasis, derive_deriv_design
from jmstate.errors import ConfigError, RootBracketError
from jmstate.likelihood import IntensityFunction, spline_bases
from jmstate.models import (LongitudinalRecord, SubjectHistory, TransitionTopology,
                            validate_dataset)
from jmstate.numerics import brent_root
from jmstate.params import (BaselineGroup, ModelParameters, ModelSpec, SharedCovariate,
                            chol_from_covariance, pack)
from jmstate.workers import parallel_map

INVERSION_TOL = 1e-10

REFERENCE_KNOTS = (0.004, 4.120, 7.455, 10.908, 18.201)
REFERENCE_SPLINES = {
    (0, 1): (-9.200, -3.500, -5.000, -3.900, -3.500, -2.500, -2.000),
    (0, 2): (-9.860, -4.472, -5.128, -3.486, -2.457, -0.989, -0.715),
    (1, 2): (-2.527, -2.170, -2.492, -2.156, -1.228, -0.955, -0.161),
}


@dataclass(frozen=True)
class CovariateLaw:
    """Закон генерации базовой ковариаты"""
    name: str
    kind: str = "normal"
    mean: float = 0.0
    variance: float = 1.0
    low: float = 0.0
    high: float = 1.0
    p: float = 0.5

    def draw(self, rng):
        if self.kind == "normal":
            return float(rng.normal(self.mean, math.sqrt(self.variance)))
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "bernoulli":
            return float(rng.uniform() < self.p)
        if self.kind == "constant":
            return float(self.mean)
        raise ConfigError(f"unknown covariate law '{self.kind}'", {'covariate': self.name})


@dataclass(frozen=True, eq=False)
class SimulationDesign:
    """Что и как генерировать"""
    spec: ModelSpec
    params: ModelParameters
    covariates: tuple = ()
    schedule: tuple = tuple(k / 3.0 for k in range(50))
    censoring: tuple = (1.0, 25.0)
    n_subjects: int = 500
    seed: int = 0
    initial_state: int = 0
    t_entry: float = 0.0
    horizon: float = None

    def __post_init__(self):
        if any(b < a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ConfigError("measurement schedule must be non-decreasing")
        low, high = self.censoring
        if not 0 < low <= high:
            raise ConfigError("censoring support must be positive", {'censoring': self.censoring})
        if not self.spec.knots_placed:
            raise ConfigError("simulation needs placed knots")
        if self.horizon is None:
            object.__setattr__(self, 'horizon', 2.0 * high)


@dataclass
class SimulatedSubject:
    records: list
    history: SubjectHistory
    b: np.ndarray
    covariates: dict
    residuals: list = field(default_factory=list)


def _event_time(intensity, k, t0, u, horizon):
    """Решение int_{t0}^T lambda + log u = 0; None если событие за горизонтом"""
    target = -math.log(u)

    def excess(t):
        return intensity.cumulative(k, t0, t) - target

    lo = t0 + 1e-10
    if lo >= horizon:
        return None, 0.0
    try:
        root = brent_root(excess, lo, horizon, tol=INVERSION_TOL)
    except RootBracketError:
        return None, 0.0
    return root, abs(excess(root))


def simulate_subject(design, rng, subject_id="1", bases=None):
    """Ковариаты, b, цензура, шум, затем по равномерной на каждый исходящий переход"""
    spec, params = design.spec, design.params
    topology = spec.topology
    covariates = {law.name: law.draw(rng) for law in design.covariates}
    q = spec.q
    b = params.L @ rng.standard_normal(q) if q else np.zeros(0)
    censor = float(rng.uniform(*design.censoring))
    noise = rng.standard_normal(len(design.schedule))

    intensity = IntensityFunction(spec, params, covariates, b, bases)
    state, t0 = design.initial_state, design.t_entry
    times, states, residuals = [t0], [state], []
    while state not in topology.absorbing:
        best_time, best_target, best_residual = None, None, 0.0
        for pair in topology.outgoing(state):
            k = topology.index(*pair) - 1
            u = rng.uniform()
            event, residual = _event_time(intensity, k, t0, u, design.horizon)
            if event is not None and (best_time is None or event < best_time):
                best_time, best_target, best_residual = event, pair[1], residual
        if best_time is None or best_time > censor:
            times.append(censor)
            states.append(state)
            break
        times.append(best_time)
        states.append(best_target)
        residuals.append(best_residual)
        state, t0 = best_target, best_time

    history = SubjectHistory.from_events(subject_id, times, states)
    first_time = history.times[0]
    schedule = np.array(design.schedule, dtype=float)
    keep = schedule <= first_time
    t = schedule[keep]
    arrays = {name: np.full(t.shape, value) for name, value in covariates.items()}
    mean = spec.evaluator.fixed(t, arrays) @ params.beta
    if q:
        mean = mean + spec.evaluator.random(t, arrays) @ b
    y = mean + params.sigma * noise[keep]
    records = [LongitudinalRecord(str(subject_id), float(ti), float(yi), dict(covariates))
               for ti, yi in zip(t, y)]
    return SimulatedSubject(records, history, b, covariates, residuals)


def subject_streams(seed, n_subjects):
    """Независимые генераторы по субъектам"""
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    return [np.random.default_rng(child) for child in children]


def simulate_dataset(design, threads=None):
    """Набор данных и запись истинных значений"""
    bases = spline_bases(design.spec)
    streams = subject_streams(design.seed, design.n_subjects)

    def run(item):
        index, rng = item
        return simulate_subject(design, rng, str(index + 1), bases)

    subjects = parallel_map(run, enumerate(streams), threads)
    dataset = validate_dataset([r for s in subjects for r in s.records],
                               [s.history for s in subjects], design.spec.topology)
    residuals = [r for s in subjects for r in s.residuals]
    truth = {
        'seed': design.seed,
        'n_subjects': design.n_subjects,
        'parameters': pack(design.params, design.spec).as_dict(),
        'D': design.params.D.tolist(),
        'random_effects': {s.history.id: [float(v) for v in s.b] for s in subjects},
        'covariates': {s.history.id: s.covariates for s in subjects},
        'max_inversion_residual': float(max(residuals)) if residuals else 0.0,
    }
    log_action("SIMULATED", f"subjects={design.n_subjects} seed={design.seed} "
                            f"events={len(residuals)}")
    return dataset, truth


def reference_spec(knots=REFERENCE_KNOTS):
    """Модель болезнь-смерть с маркером: уровень и наклон на всех переходах"""
    topology = TransitionTopology.illness_death()
    fixed = ("1", "X", "time", "time:X")
    random = ("1", "time")
    bases = (TimeBasis("time"),)
    deriv = derive_deriv_design(fixed, random, bases)
    return ModelSpec(
        topology=topology,
        fixed_design=fixed,
        random_design=random,
        time_basis=bases,
        deriv_design=deriv,
        per_transition_covariates=tuple(SharedCovariate("X", (pair,)) for pair in topology.allowed),
        dependence_form={pair: "both" for pair in topology.allowed},
        baseline_groups=tuple(BaselineGroup((pair,), knots) for pair in topology.allowed),
    )


def reference_parameters(spec):
    """Истинные значения для исследования восстановления"""
    eta_level = {(0, 1): 0.925, (0, 2): 0.297, (1, 2): 0.071}
    eta_slope = {(0, 1): 1.344, (0, 2): -1.096, (1, 2): 0.009}
    eta = [eta_level[pair] if kind == "level" else eta_slope[pair] for pair, kind in spec.layout.eta_terms]
    return ModelParameters(
        beta=np.array([-0.793, 0.543, -0.096, 0.027]),
        log_sigma=-0.737,
        d_chol=chol_from_covariance(np.array([[0.349, -0.041], [-0.041, 0.062]])),
        gamma=np.array([0.281, 0.023, -0.169]),
        zeta=np.zeros(0),
        eta=np.array(eta),
        spline_coefs=tuple(np.array(REFERENCE_SPLINES[group.reference]) for group in spec.baseline_groups),
    )


def reference_design(n_subjects=1500, seed=0):
    spec = reference_spec()
    return SimulationDesign(
        spec=spec,
        params=reference_parameters(spec),
        covariates=(CovariateLaw("X", "normal", mean=2.04, variance=0.5),),
        n_subjects=n_subjects,
        seed=seed,
    )
