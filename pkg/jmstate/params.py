# Спецификация модели и упаковка параметров
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from jmstate.design import DesignEvaluator, DerivDesign, TimeBasis
from jmstate.errors import ConfigError, ValidationError
from jmstate.models import transition_label

DEPENDENCE_FORMS = ("none", "level", "slope", "both")


@dataclass(frozen=True)
class SharedCovariate:
    """Ковариата с одним коэффициентом на несколько переходов"""
    covariate: str
    transitions: tuple

    def __post_init__(self):
        pairs = tuple((int(h), int(k)) for h, k in self.transitions)
        if not pairs:
            raise ConfigError("covariate without transitions", {'covariate': self.covariate})
        object.__setattr__(self, 'transitions', pairs)

    def label(self):
        joined = ",".join(transition_label(p) for p in self.transitions)
        return f"gamma[{joined}|{self.covariate}]"


@dataclass(frozen=True)
class BaselineGroup:
    """Группа переходов с общей формой базовой интенсивности"""
    transitions: tuple
    knots: tuple = None

    def __post_init__(self):
        pairs = tuple((int(h), int(k)) for h, k in self.transitions)
        if not pairs:
            raise ConfigError("empty baseline group")
        object.__setattr__(self, 'transitions', pairs)
        if self.knots is not None:
            object.__setattr__(self, 'knots', tuple(float(x) for x in self.knots))

    @property
    def reference(self):
        return self.transitions[0]


@dataclass(frozen=True)
class SplineSpec:
    degree: int = 3
    internal_knots: int = 3


@dataclass(frozen=True)
class QuadratureSpec:
    gh_order: int = 9
    gk_order: int = 15
    gk_panels: int = 1

    def __post_init__(self):
        if self.gh_order < 1:
            raise ConfigError("gh_order must be at least 1")
        if self.gk_order not in (7, 15):
            raise ConfigError("gk_order must be 7 or 15", {'gk_order': self.gk_order})
        if self.gk_panels < 1:
            raise ConfigError("gk_panels must be at least 1")


@dataclass(frozen=True)
class ModelSpec:
    """Структура совместной модели"""
    topology: object
    fixed_design: tuple
    random_design: tuple
    time_basis: tuple = (TimeBasis("time"),)
    deriv_design: DerivDesign = None
    per_transition_covariates: tuple = ()
    dependence_form: tuple = ()
    baseline_groups: tuple = ()
    spline: SplineSpec = SplineSpec()
    quadrature: QuadratureSpec = QuadratureSpec()
    clock: str = "forward"

    def __post_init__(self):
        topology = self.topology
        object.__setattr__(self, 'fixed_design', tuple(self.fixed_design))
        object.__setattr__(self, 'random_design', tuple(self.random_design))
        object.__setattr__(self, 'time_basis', tuple(self.time_basis))
        object.__setattr__(self, 'per_transition_covariates', tuple(self.per_transition_covariates))

        if self.clock != "forward":
            raise ConfigError("only the forward clock is supported", {'clock': self.clock})
        if not self.fixed_design:
            raise ConfigError("fixed design needs at least one term")

        forms = dict(self.dependence_form.items() if isinstance(self.dependence_form, dict)
                     else self.dependence_form)
        normalized = []
        for pair in topology.allowed:
            form = forms.pop(pair, "none")
            if form not in DEPENDENCE_FORMS:
                raise ConfigError(f"unknown dependence form '{form}'",
                                  {'transition': transition_label(pair)})
            normalized.append((pair, form))
        if forms:
            raise ConfigError("dependence form for a transition not in the topology",
                              {'transitions': [transition_label(p) for p in forms]})
        object.__setattr__(self, 'dependence_form', tuple(normalized))

        groups = tuple(self.baseline_groups) or tuple(BaselineGroup((pair,)) for pair in topology.allowed)
        seen = [pair for group in groups for pair in group.transitions]
        if sorted(seen) != sorted(topology.allowed) or len(set(seen)) != len(seen):
            raise ConfigError("baseline groups must partition the transitions")
        object.__setattr__(self, 'baseline_groups', groups)

        for shared in self.per_transition_covariates:
            for pair in shared.transitions:
                if not topology.is_allowed(*pair):
                    raise ConfigError("transition not allowed",
                                      {'covariate': shared.covariate, 'transition': transition_label(pair)})

        if self.deriv_design is None and any(f in ("slope", "both") for _, f in normalized):
            raise ConfigError("slope dependence requires a derivative design")
        # проверяет индексы производной
        self.evaluator

    @cached_property
    def evaluator(self):
        return DesignEvaluator(self.fixed_design, self.random_design, self.time_basis, self.deriv_design)

    @property
    def p(self):
        return len(self.fixed_design)

    @property
    def q(self):
        return len(self.random_design)

    def dependence(self, pair):
        return dict(self.dependence_form)[pair]

    def has_level(self, pair):
        return self.dependence(pair) in ("level", "both")

    def has_slope(self, pair):
        return self.dependence(pair) in ("slope", "both")

    def group_of(self, pair):
        for index, group in enumerate(self.baseline_groups):
            if pair in group.transitions:
                return index
        raise ValidationError("transition not allowed", {'transition': transition_label(pair)})

    @property
    def n_basis(self):
        return self.spline.internal_knots + self.spline.degree + 1

    @property
    def knots_placed(self):
        return all(g.knots is not None for g in self.baseline_groups)

    def with_knots(self, knot_vectors):
        """Копия спецификации с расставленными узлами"""
        groups = tuple(replace(group, knots=tuple(knots))
                       for group, knots in zip(self.baseline_groups, knot_vectors))
        return replace(self, baseline_groups=groups)

    def with_quadrature(self, **changes):
        return replace(self, quadrature=replace(self.quadrature, **changes))

    def covariate_names(self):
        names = list(self.evaluator.covariate_names())
        for shared in self.per_transition_covariates:
            if shared.covariate not in names:
                names.append(shared.covariate)
        return tuple(names)

    def gamma_design(self, covariates):
        """Матрица K x n_gamma: значение ковариаты на своих переходах, иначе 0"""
        pairs = self.topology.allowed
        out = np.zeros((len(pairs), len(self.per_transition_covariates)))
        for j, shared in enumerate(self.per_transition_covariates):
            if shared.covariate not in covariates:
                raise ValidationError("unknown covariate column", {'covariate': shared.covariate})
            for pair in shared.transitions:
                out[pairs.index(pair), j] = float(covariates[shared.covariate])
        return out

    @cached_property
    def layout(self):
        return ParameterLayout(self)


def vech_indices(q):
    """Индексы нижнего треугольника построчно"""
    return [(i, j) for i in range(q) for j in range(i + 1)]


def dimension_from_vech(n):
    q = int(round((math.sqrt(8 * n + 1) - 1) / 2))
    if q * (q + 1) // 2 != n:
        raise ValidationError("invalid Cholesky parameter length", {'length': n})
    return q


def chol_matrix(d_chol):
    """Нижнетреугольный L; диагональ хранится в логарифмах"""
    d_chol = np.asarray(d_chol, dtype=float)
    q = dimension_from_vech(d_chol.size)
    L = np.zeros((q, q))
    for value, (i, j) in zip(d_chol, vech_indices(q)):
        L[i, j] = math.exp(value) if i == j else value
    return L


def covariance_from_chol(d_chol):
    L = chol_matrix(d_chol)
    return L @ L.T


def chol_from_covariance(D):
    """Параметры Холецкого по ковариационной матрице"""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if D.size == 0:
        return np.zeros(0)
    try:
        L = np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        raise ValidationError("covariance matrix is not positive definite") from None
    return np.array([math.log(L[i, j]) if i == j else L[i, j] for i, j in vech_indices(D.shape[0])])


@dataclass
class ModelParameters:
    """Параметры модели по блокам"""
    beta: np.ndarray
    log_sigma: float
    d_chol: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray
    spline_coefs: tuple = field(default_factory=tuple)

    @property
    def sigma(self):
        return math.exp(self.log_sigma)

    @property
    def L(self):
        return chol_matrix(self.d_chol)

    @property
    def D(self):
        return covariance_from_chol(self.d_chol)

    def copy(self):
        return ModelParameters(np.array(self.beta, dtype=float), float(self.log_sigma),
                               np.array(self.d_chol, dtype=float), np.array(self.gamma, dtype=float),
                               np.array(self.zeta, dtype=float), np.array(self.eta, dtype=float),
                               tuple(np.array(c, dtype=float) for c in self.spline_coefs))


@dataclass(frozen=True)
class ParameterVector:
    """Плоский вектор параметров с именами"""
    values: np.ndarray
    names: tuple

    def __len__(self):
        return len(self.names)

    def as_dict(self):
        return dict(zip(self.names, (float(v) for v in self.values)))


class ParameterLayout:
    """Порядок блоков: beta, log_sigma, D_chol, gamma, zeta, eta, spline"""

    def __init__(self, spec):
        self.spec = spec
        topology = spec.topology
        self.zeta_pairs = tuple(pair for group in spec.baseline_groups for pair in group.transitions[1:])
        self.eta_terms = []
        for pair in topology.allowed:
            if spec.has_level(pair):
                self.eta_terms.append((pair, "level"))
            if spec.has_slope(pair):
                self.eta_terms.append((pair, "slope"))
        self.eta_terms = tuple(self.eta_terms)

        names = [f"beta[{term}]" for term in spec.fixed_design]
        names.append("log_sigma")
        names.extend(f"D_chol[{i + 1},{j + 1}]" for i, j in vech_indices(spec.q))
        names.extend(shared.label() for shared in spec.per_transition_covariates)
        names.extend(f"zeta[{transition_label(pair)}]" for pair in self.zeta_pairs)
        names.extend(f"eta_{kind}[{transition_label(pair)}]" for pair, kind in self.eta_terms)
        for group in spec.baseline_groups:
            label = transition_label(group.reference)
            names.extend(f"spline[{label}][{j + 1}]" for j in range(spec.n_basis))
        self.names = tuple(names)

        sizes = (('beta', spec.p), ('log_sigma', 1), ('d_chol', spec.q * (spec.q + 1) // 2),
                 ('gamma', len(spec.per_transition_covariates)), ('zeta', len(self.zeta_pairs)),
                 ('eta', len(self.eta_terms)), ('spline', spec.n_basis * len(spec.baseline_groups)))
        self.slices = {}
        start = 0
        for block, size in sizes:
            self.slices[block] = slice(start, start + size)
            start += size
        self.size = start

        # алиасы вида gamma[0->1|X] для общих коэффициентов
        self.aliases = {}
        gamma_start = self.slices['gamma'].start
        for j, shared in enumerate(spec.per_transition_covariates):
            for pair in shared.transitions:
                self.aliases[f"gamma[{transition_label(pair)}|{shared.covariate}]"] = gamma_start + j

    def index_of(self, name):
        """Позиция параметра по имени или алиасу"""
        if name in self.aliases:
            return self.aliases[name]
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError("unknown parameter name", {'name': name}) from None

    def block_of(self, index):
        for block, part in self.slices.items():
            if part.start <= index < part.stop:
                return block
        raise ValidationError("parameter index out of range", {'index': index})

    def expand(self, params):
        """Коэффициенты по переходам: zeta, eta_level, eta_slope, номер группы"""
        pairs = self.spec.topology.allowed
        K = len(pairs)
        zeta = np.zeros(K)
        for value, pair in zip(params.zeta, self.zeta_pairs):
            zeta[pairs.index(pair)] = value
        eta_level = np.zeros(K)
        eta_slope = np.zeros(K)
        for value, (pair, kind) in zip(params.eta, self.eta_terms):
            target = eta_level if kind == "level" else eta_slope
            target[pairs.index(pair)] = value
        group = np.array([self.spec.group_of(pair) for pair in pairs], dtype=int)
        return {'zeta': zeta, 'eta_level': eta_level, 'eta_slope': eta_slope, 'group': group}


def zero_parameters(spec):
    """Нулевые параметры (D = I, sigma = 1)"""
    layout = spec.layout
    return unpack(np.zeros(layout.size), spec)


def pack(params, spec):
    """Структура -> ParameterVector"""
    layout = spec.layout
    blocks = {
        'beta': np.atleast_1d(np.asarray(params.beta, dtype=float)),
        'log_sigma': np.array([float(params.log_sigma)]),
        'd_chol': np.atleast_1d(np.asarray(params.d_chol, dtype=float)),
        'gamma': np.atleast_1d(np.asarray(params.gamma, dtype=float)),
        'zeta': np.atleast_1d(np.asarray(params.zeta, dtype=float)),
        'eta': np.atleast_1d(np.asarray(params.eta, dtype=float)),
    }
    coefs = list(params.spline_coefs)
    if len(coefs) != len(spec.baseline_groups):
        raise ValidationError("spline coefficient groups do not match the model",
                              {'expected': len(spec.baseline_groups), 'got': len(coefs)})
    blocks['spline'] = (np.concatenate([np.asarray(c, dtype=float).ravel() for c in coefs])
                        if coefs else np.zeros(0))

    values = np.empty(layout.size)
    for block, part in layout.slices.items():
        data = blocks[block]
        if data.size != part.stop - part.start:
            raise ValidationError("dimension mismatch",
                                  {'block': block, 'expected': part.stop - part.start, 'got': int(data.size)})
        values[part] = data
    return ParameterVector(values, layout.names)


def unpack(vector, spec):
    """ParameterVector (или массив) -> структура"""
    layout = spec.layout
    values = np.asarray(vector.values if isinstance(vector, ParameterVector) else vector, dtype=float)
    if values.ndim != 1 or values.size != layout.size:
        raise ValidationError("dimension mismatch", {'expected': layout.size, 'got': int(values.size)})
    spline = values[layout.slices['spline']]
    n_basis = spec.n_basis
    coefs = tuple(spline[g * n_basis:(g + 1) * n_basis].copy() for g in range(len(spec.baseline_groups)))
    return ModelParameters(
        beta=values[layout.slices['beta']].copy(),
        log_sigma=float(values[layout.slices['log_sigma']][0]),
        d_chol=values[layout.slices['d_chol']].copy(),
        gamma=values[layout.slices['gamma']].copy(),
        zeta=values[layout.slices['zeta']].copy(),
        eta=values[layout.slices['eta']].copy(),
        spline_coefs=coefs,
    )
