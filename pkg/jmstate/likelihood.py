# Совместное правдоподобие: продольная часть, мультисостояния, случайные эффекты
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import logsumexp

from jmstate import log_action, logger
from jmstate.errors import ConfigError, NumericalError, ValidationError
from jmstate.numerics import (BSplineBasis, basis_dot, gauss_hermite, kronrod_rule,
                              pseudo_adaptive_nodes)
from jmstate.params import unpack
from jmstate.workers import parallel_map

LOG_2PI = math.log(2.0 * math.pi)


def spline_bases(spec):
    """Базисы B-сплайнов по группам базовых интенсивностей"""
    if not spec.knots_placed:
        raise ConfigError("knots are not placed for every baseline group")
    bases = []
    for group in spec.baseline_groups:
        basis = BSplineBasis.from_breakpoints(group.knots, spec.spline.degree)
        if basis.n_basis != spec.n_basis:
            raise ConfigError("knot count does not match the spline settings",
                              {'expected': spec.n_basis, 'got': basis.n_basis})
        bases.append(basis)
    return bases


@dataclass(frozen=True, eq=False)
class PreparedParameters:
    """Параметры в виде, удобном для векторных вычислений"""
    beta: np.ndarray
    sigma: float
    L: np.ndarray
    log_det_D: float
    gamma: np.ndarray
    coefs: np.ndarray
    zeta: np.ndarray
    eta_level: np.ndarray
    eta_slope: np.ndarray

    @property
    def q(self):
        return self.L.shape[0]


def prepare(params, spec):
    """ModelParameters (или вектор) -> PreparedParameters"""
    if not hasattr(params, 'beta'):
        params = unpack(params, spec)
    expanded = spec.layout.expand(params)
    L = params.L
    diag = np.diag(L)
    if L.size and (np.any(diag <= 0) or not np.all(np.isfinite(L))):
        raise NumericalError("singular random-effects covariance")
    coefs = np.array([np.asarray(c, dtype=float) for c in params.spline_coefs]).reshape(
        len(spec.baseline_groups), spec.n_basis)
    return PreparedParameters(
        beta=np.asarray(params.beta, dtype=float), sigma=params.sigma, L=L,
        log_det_D=2.0 * float(np.sum(np.log(diag))) if L.size else 0.0,
        gamma=np.asarray(params.gamma, dtype=float), coefs=coefs,
        zeta=expanded['zeta'], eta_level=expanded['eta_level'], eta_slope=expanded['eta_slope'],
    )


@dataclass(eq=False)
class SubjectWorkspace:
    """Всё, что нужно для вклада одного субъекта"""
    id: str
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    sojourns: list
    covariates: dict
    gamma_design: np.ndarray
    # строки интенсивности: узлы интегралов и моменты событий
    row_times: np.ndarray
    row_trans: np.ndarray
    row_group: np.ndarray
    row_weight: np.ndarray
    row_event: np.ndarray
    B_rows: np.ndarray
    X_rows: np.ndarray
    Z_rows: np.ndarray
    dX_rows: np.ndarray
    dZ_rows: np.ndarray
    mode: np.ndarray = None
    scale: np.ndarray = None
    mode_fallback: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def n_obs(self):
        return self.y.size


def _longitudinal_covariates(records):
    names = records[0].covariates.keys() if records else ()
    return {name: np.array([r.covariates[name] for r in records]) for name in names}


def build_workspace(history, records, spec, bases=None):
    """Рабочая область субъекта: дизайны, узлы Кронрода, строки интенсивностей"""
    bases = bases or spline_bases(spec)
    evaluator = spec.evaluator
    topology = spec.topology
    times = np.array([r.t for r in records], dtype=float)
    y = np.array([r.y for r in records], dtype=float)
    covs = _longitudinal_covariates(records)
    baseline = dict(records[0].covariates) if records else {}

    X = evaluator.fixed(times, covs) if times.size else np.zeros((0, spec.p))
    Z = evaluator.random(times, covs) if times.size else np.zeros((0, spec.q))

    order, panels = spec.quadrature.gk_order, spec.quadrature.gk_panels
    row_times, row_trans, row_weight, row_event = [], [], [], []
    sojourns = history.sojourns()
    for state, start, stop, target in sojourns:
        nodes, weights = kronrod_rule(start, stop, order, panels)
        for pair in topology.outgoing(state):
            k = topology.index(*pair) - 1
            row_times.append(nodes)
            row_trans.append(np.full(nodes.size, k))
            row_weight.append(weights)
            row_event.append(np.zeros(nodes.size, dtype=bool))
        if target is not None:
            row_times.append(np.array([stop]))
            row_trans.append(np.array([topology.index(state, target) - 1]))
            row_weight.append(np.zeros(1))
            row_event.append(np.ones(1, dtype=bool))

    row_times = np.concatenate(row_times) if row_times else np.zeros(0)
    row_trans = np.concatenate(row_trans).astype(int) if row_trans else np.zeros(0, dtype=int)
    row_weight = np.concatenate(row_weight) if row_weight else np.zeros(0)
    row_event = np.concatenate(row_event) if row_event else np.zeros(0, dtype=bool)
    groups = np.array([spec.group_of(pair) for pair in topology.allowed], dtype=int)
    row_group = groups[row_trans] if row_trans.size else np.zeros(0, dtype=int)

    B_rows = np.zeros((row_times.size, spec.n_basis))
    for g, basis in enumerate(bases):
        mask = row_group == g
        if mask.any():
            B_rows[mask] = basis.evaluate(row_times[mask])

    n = row_times.size
    baseline_arrays = {name: np.full(n, value) for name, value in baseline.items()}
    X_rows = evaluator.fixed(row_times, baseline_arrays) if n else np.zeros((0, spec.p))
    Z_rows = evaluator.random(row_times, baseline_arrays) if n else np.zeros((0, spec.q))
    if spec.deriv_design is not None and n:
        dX_rows = evaluator.dfixed(row_times, baseline_arrays)
        dZ_rows = evaluator.drandom(row_times, baseline_arrays)
    else:
        dX_rows, dZ_rows = np.zeros((n, spec.p)), np.zeros((n, spec.q))

    gamma_design = spec.gamma_design(baseline) if spec.per_transition_covariates else \
        np.zeros((topology.n_transitions, 0))

    return SubjectWorkspace(
        id=history.id, X=X, Z=Z, y=y, sojourns=sojourns, covariates=baseline,
        gamma_design=gamma_design, row_times=row_times, row_trans=row_trans, row_group=row_group,
        row_weight=row_weight, row_event=row_event, B_rows=B_rows, X_rows=X_rows, Z_rows=Z_rows,
        dX_rows=dX_rows, dZ_rows=dZ_rows,
    )


def build_workspaces(dataset, spec, threads=None):
    """Рабочие области всех субъектов в порядке набора данных"""
    bases = spline_bases(spec)
    outside = 0
    for history in dataset.histories:
        endpoints = [t for _, start, stop, _ in history.sojourns() for t in (start, stop)]
        if any(b.out_of_range(endpoints) for b in bases):
            outside += 1
    if outside:
        # одно предупреждение на подгонку
        logger.warning(f"{outside} subjects have times outside the knot range; "
                       "baseline evaluations are clamped to the boundary knots")
        log_action("KNOT_CLAMP", f"subjects={outside}")

    def build(history):
        return build_workspace(history, dataset.records_for(history.id), spec, bases)

    return parallel_map(build, dataset.histories, threads)


# Скалярные формы модели

def _covariate_arrays(covs, t):
    return {name: np.full(np.shape(t), float(value)) for name, value in (covs or {}).items()}


def true_level(b, params, t, covs, spec):
    """Y*(t) = X(t)'beta + Z(t)'b"""
    t_arr = np.atleast_1d(float(t))
    arrays = _covariate_arrays(covs, t_arr)
    x = spec.evaluator.fixed(t_arr, arrays)[0]
    z = spec.evaluator.random(t_arr, arrays)[0]
    value = x @ np.asarray(params.beta)
    if z.size:
        value += z @ np.atleast_1d(np.asarray(b, dtype=float))
    return float(value)


def true_slope(b, params, t, covs, spec):
    """dY*(t)/dt через производный дизайн"""
    if spec.deriv_design is None:
        raise ConfigError("model has no derivative design")
    t_arr = np.atleast_1d(float(t))
    arrays = _covariate_arrays(covs, t_arr)
    dx = spec.evaluator.dfixed(t_arr, arrays)[0]
    dz = spec.evaluator.drandom(t_arr, arrays)[0]
    value = dx @ np.asarray(params.beta)
    if dz.size:
        value += dz @ np.atleast_1d(np.asarray(b, dtype=float))
    return float(value)


def log_intensity(h, k, t, b, params, covs, spec, bases=None):
    """log lambda_hk(t | b)"""
    topology = spec.topology
    index = topology.index(h, k) - 1
    pair = (h, k)
    bases = bases or spline_bases(spec)
    group = spec.group_of(pair)
    layout = spec.layout
    expanded = layout.expand(params)
    value = float(bases[group].combine(t, np.asarray(params.spline_coefs[group]))[0])
    value += expanded['zeta'][index]
    if spec.per_transition_covariates:
        value += float(spec.gamma_design(covs)[index] @ np.asarray(params.gamma))
    if expanded['eta_level'][index]:
        value += expanded['eta_level'][index] * true_level(b, params, t, covs, spec)
    if expanded['eta_slope'][index]:
        value += expanded['eta_slope'][index] * true_slope(b, params, t, covs, spec)
    return value


def transition_intensity(h, k, t, b, params, covs, spec, bases=None):
    """lambda_hk(t | b) > 0"""
    return math.exp(log_intensity(h, k, t, b, params, covs, spec, bases))


# Векторные компоненты по узлам b (n_nodes, q)

def _linear_rows(prep, ws):
    """Смещение a и наклон R для log lambda = a + R b по строкам интенсивности"""
    trans = ws.row_trans
    eta_l = prep.eta_level[trans]
    eta_s = prep.eta_slope[trans]
    a = basis_dot(ws.B_rows, prep.coefs[ws.row_group]) + prep.zeta[trans]
    if prep.gamma.size:
        a = a + ws.gamma_design[trans] @ prep.gamma
    a = a + eta_l * (ws.X_rows @ prep.beta) + eta_s * (ws.dX_rows @ prep.beta)
    R = eta_l[:, None] * ws.Z_rows + eta_s[:, None] * ws.dZ_rows
    return a, R


def longit_log_components(prep, ws, nodes):
    mean = ws.X @ prep.beta
    resid = ws.y[:, None] - mean[:, None] - ws.Z @ nodes.T
    n = ws.y.size
    return -0.5 * n * (LOG_2PI + 2.0 * math.log(prep.sigma)) - (resid ** 2).sum(axis=0) / (2.0 * prep.sigma ** 2)


def mstate_log_components(prep, ws, nodes):
    if ws.row_times.size == 0:
        return np.zeros(nodes.shape[0])
    a, R = _linear_rows(prep, ws)
    log_lambda = a[:, None] + R @ nodes.T
    event = ws.row_event
    with np.errstate(over='ignore', invalid='ignore'):
        cumulative = (ws.row_weight[~event][:, None] * np.exp(log_lambda[~event])).sum(axis=0)
        value = log_lambda[event].sum(axis=0) - cumulative
    return np.where(np.isnan(value), -np.inf, value)


def prior_log_components(prep, nodes):
    q = prep.q
    if q == 0:
        return np.zeros(nodes.shape[0])
    scaled = solve_triangular(prep.L, nodes.T, lower=True)
    return -0.5 * q * LOG_2PI - 0.5 * prep.log_det_D - 0.5 * (scaled ** 2).sum(axis=0)


def log_integrand(prep, ws, nodes):
    return (longit_log_components(prep, ws, nodes) + mstate_log_components(prep, ws, nodes)
            + prior_log_components(prep, nodes))


def _as_nodes(b, q):
    return np.atleast_1d(np.asarray(b, dtype=float)).reshape(1, q)


def conditional_longit_logdensity(b, params, ws, spec):
    prep = prepare(params, spec)
    return float(longit_log_components(prep, ws, _as_nodes(b, spec.q))[0])


def conditional_mstate_logdensity(b, params, ws, spec):
    """Сумма по пребываниям: -интегралы интенсивностей + log lambda в момент перехода"""
    prep = prepare(params, spec)
    value = float(mstate_log_components(prep, ws, _as_nodes(b, spec.q))[0])
    if math.isnan(value):
        raise NumericalError("non-finite intensity", {'id': ws.id})
    return value


def random_effects_logdensity(b, params):
    """Гауссова плотность N(0, D)"""
    L = params.L
    q = L.shape[0]
    if q == 0:
        return 0.0
    diag = np.diag(L)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise NumericalError("singular random-effects covariance")
    b = np.atleast_1d(np.asarray(b, dtype=float))
    scaled = solve_triangular(L, b, lower=True)
    return float(-0.5 * q * LOG_2PI - np.sum(np.log(diag)) - 0.5 * scaled @ scaled)


# Эмпирический байесовский мод

def _posterior_derivatives(prep, ws, b):
    """Значение, градиент и гессиан log f_Y + log f_E + log f_b по b"""
    q = prep.q
    nodes = b.reshape(1, q)
    value = float(log_integrand(prep, ws, nodes)[0])

    resid = ws.y - ws.X @ prep.beta - ws.Z @ b
    s2 = prep.sigma ** 2
    grad = ws.Z.T @ resid / s2
    hess = -ws.Z.T @ ws.Z / s2

    if ws.row_times.size:
        a, R = _linear_rows(prep, ws)
        with np.errstate(over='ignore'):
            lam = np.exp(a + R @ b)
        event = ws.row_event
        wl = ws.row_weight * lam * (~event)
        grad = grad + R[event].sum(axis=0) - R.T @ wl
        hess = hess - (R * wl[:, None]).T @ R

    D_inv = cho_solve((prep.L, True), np.eye(q))
    grad = grad - D_inv @ b
    hess = hess - D_inv
    return value, grad, hess


def empirical_bayes_mode(params, ws, spec, prep=None):
    """Мод апостериорной плотности b и множитель кривизны chol((-H)^-1)"""
    prep = prep or prepare(params, spec)
    q = spec.q
    if q == 0:
        return np.zeros(0), np.zeros((0, 0)), False

    def objective(b):
        value, _, _ = _posterior_derivatives(prep, ws, b)
        return -value if np.isfinite(value) else 1e300

    def gradient(b):
        return -_posterior_derivatives(prep, ws, b)[1]

    def hessian(b):
        return -_posterior_derivatives(prep, ws, b)[2]

    try:
        result = minimize(objective, np.zeros(q), jac=gradient, hess=hessian, method='trust-exact',
                          options={'gtol': 1e-9, 'maxiter': 200})
        mode = result.x
        _, grad, hess = _posterior_derivatives(prep, ws, mode)
        if not (np.all(np.isfinite(mode)) and np.all(np.isfinite(hess))) or np.max(np.abs(grad)) > 1e-5:
            raise NumericalError("mode search did not converge", {'id': ws.id})
        scale = np.linalg.cholesky(np.linalg.inv(-hess))
        return mode, scale, False
    except (NumericalError, np.linalg.LinAlgError, ValueError) as error:
        logger.warning(f"Empirical Bayes fallback for subject {ws.id}: {error}")
        log_action("EB_FALLBACK", f"id={ws.id}")
        return np.zeros(q), prep.L.copy(), True


def refresh_modes(params, workspaces, spec, threads=None):
    """Пересчёт мод и масштабов адаптивной квадратуры"""
    prep = prepare(params, spec)

    def compute(ws):
        return empirical_bayes_mode(params, ws, spec, prep)

    results = parallel_map(compute, workspaces, threads)
    fallbacks = 0
    for ws, (mode, scale, fallback) in zip(workspaces, results):
        ws.mode, ws.scale, ws.mode_fallback = mode, scale, fallback
        fallbacks += int(fallback)
    log_action("EB_REFRESH", f"subjects={len(workspaces)} fallbacks={fallbacks}")
    return fallbacks


def adapted_grid(ws, spec, gh_order=None, params=None):
    """Сетка псевдо-адаптивной квадратуры субъекта"""
    if ws.mode is None:
        if params is None:
            raise ValidationError("workspace has no empirical Bayes mode", {'id': ws.id})
        ws.mode, ws.scale, ws.mode_fallback = empirical_bayes_mode(params, ws, spec)
    rule = gauss_hermite(gh_order or spec.quadrature.gh_order)
    return pseudo_adaptive_nodes(rule, ws.mode, ws.scale)


def subject_loglik(params, ws, spec, gh_order=None, prep=None):
    """log интеграла f_Y f_E f_b db псевдо-адаптивным Гауссом-Эрмитом"""
    prep = prep or prepare(params, spec)
    grid = adapted_grid(ws, spec, gh_order, params)
    values = log_integrand(prep, ws, grid.nodes) + grid.log_weights
    if not np.any(np.isfinite(values)):
        logger.warning(f"All quadrature nodes underflow for subject {ws.id}")
        return -np.inf
    return float(logsumexp(values))


def posterior_weights(prep, ws, grid):
    """Нормированные апостериорные веса узлов (E-шаг)"""
    values = log_integrand(prep, ws, grid.nodes) + grid.log_weights
    if not np.any(np.isfinite(values)):
        raise NumericalError("posterior moment underflow", {'id': ws.id})
    return np.exp(values - logsumexp(values))


def subject_logliks(params, workspaces, spec, gh_order=None, threads=None):
    prep = prepare(params, spec)
    for ws in workspaces:
        if ws.mode is None:
            ws.mode, ws.scale, ws.mode_fallback = empirical_bayes_mode(params, ws, spec, prep)

    def compute(ws):
        return subject_loglik(params, ws, spec, gh_order, prep)

    return np.array(parallel_map(compute, workspaces, threads))


def total_loglik(params, workspaces, spec, gh_order=None, threads=None):
    """Сумма вкладов субъектов в фиксированном порядке"""
    try:
        values = subject_logliks(params, workspaces, spec, gh_order, threads)
    except NumericalError:
        return -np.inf
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        logger.warning(f"Non-finite log-likelihood for subject {workspaces[bad[0]].id}")
        return -np.inf
    return float(np.sum(values))


# Градиент по параметрам при фиксированных узлах

def weighted_score(prep, ws, spec, nodes, pi):
    """sum_n pi_n log f(b_n) и его градиент по упакованному вектору"""
    layout = spec.layout
    slices = layout.slices
    grad = np.zeros(layout.size)
    q = prep.q
    sigma2 = prep.sigma ** 2

    # продольная часть
    resid = ws.y[:, None] - (ws.X @ prep.beta)[:, None] - ws.Z @ nodes.T
    sq = (resid ** 2).sum(axis=0)
    n_obs = ws.y.size
    log_fy = -0.5 * n_obs * (LOG_2PI + 2.0 * math.log(prep.sigma)) - sq / (2.0 * sigma2)
    grad[slices['beta']] += ws.X.T @ (resid @ pi) / sigma2
    grad[slices['log_sigma']] += float(pi @ (-n_obs + sq / sigma2))

    # случайные эффекты
    log_fb = prior_log_components(prep, nodes)
    if q:
        L = prep.L
        second = (nodes * pi[:, None]).T @ nodes
        L_inv = solve_triangular(L, np.eye(q), lower=True)
        G = L_inv.T @ L_inv @ second @ L_inv.T - np.diag(1.0 / np.diag(L))
        d_grad = [G[i, j] * L[i, j] if i == j else G[i, j] for i in range(q) for j in range(i + 1)]
        grad[slices['d_chol']] += np.array(d_grad)

    # мультисостояния
    log_fe = np.zeros(nodes.shape[0])
    if ws.row_times.size:
        a, R = _linear_rows(prep, ws)
        log_lambda = a[:, None] + R @ nodes.T
        event = ws.row_event
        with np.errstate(over='ignore', invalid='ignore'):
            lam = np.exp(log_lambda)
            log_fe = log_lambda[event].sum(axis=0) - (ws.row_weight[~event][:, None] * lam[~event]).sum(axis=0)
            g = np.where(event[:, None], 1.0, -ws.row_weight[:, None] * lam) * pi[None, :]
        row_total = g.sum(axis=1)
        trans = ws.row_trans
        K = spec.topology.n_transitions

        spline_grad = grad[slices['spline']].reshape(len(spec.baseline_groups), spec.n_basis)
        for group in range(len(spec.baseline_groups)):
            mask = ws.row_group == group
            if mask.any():
                spline_grad[group] += ws.B_rows[mask].T @ row_total[mask]
        grad[slices['spline']] = spline_grad.ravel()

        by_trans = np.bincount(trans, weights=row_total, minlength=K)
        pairs = spec.topology.allowed
        zeta_idx = [pairs.index(pair) for pair in layout.zeta_pairs]
        grad[slices['zeta']] += by_trans[zeta_idx]
        if prep.gamma.size:
            grad[slices['gamma']] += ws.gamma_design[trans].T @ row_total

        eta_l = prep.eta_level[trans]
        eta_s = prep.eta_slope[trans]
        grad[slices['beta']] += (eta_l * row_total) @ ws.X_rows + (eta_s * row_total) @ ws.dX_rows
        if layout.eta_terms:
            level = row_total * (ws.X_rows @ prep.beta) + (g * (ws.Z_rows @ nodes.T)).sum(axis=1)
            slope = row_total * (ws.dX_rows @ prep.beta) + (g * (ws.dZ_rows @ nodes.T)).sum(axis=1)
            level_by = np.bincount(trans, weights=level, minlength=K)
            slope_by = np.bincount(trans, weights=slope, minlength=K)
            eta_grad = [level_by[pairs.index(pair)] if kind == "level" else slope_by[pairs.index(pair)]
                        for pair, kind in layout.eta_terms]
            grad[slices['eta']] += np.array(eta_grad)

    log_f = log_fy + log_fb + np.where(np.isnan(log_fe), -np.inf, log_fe)
    finite = pi > 0
    value = float(pi[finite] @ log_f[finite])
    return value, grad


def subject_loglik_and_score(params, ws, spec, gh_order=None, prep=None):
    """Вклад субъекта и его точный градиент при фиксированной адаптивной сетке"""
    prep = prep or prepare(params, spec)
    grid = adapted_grid(ws, spec, gh_order, params)
    values = log_integrand(prep, ws, grid.nodes) + grid.log_weights
    if not np.any(np.isfinite(values)):
        return -np.inf, np.zeros(spec.layout.size)
    total = float(logsumexp(values))
    pi = np.exp(values - total)
    _, grad = weighted_score(prep, ws, spec, grid.nodes, pi)
    return total, grad


def total_loglik_and_score(params, workspaces, spec, gh_order=None, threads=None):
    prep = prepare(params, spec)

    def compute(ws):
        return subject_loglik_and_score(params, ws, spec, gh_order, prep)

    results = parallel_map(compute, workspaces, threads)
    value = float(np.sum([r[0] for r in results]))
    grad = np.sum([r[1] for r in results], axis=0) if results else np.zeros(spec.layout.size)
    return value, grad


class IntensityFunction:
    """Интенсивности переходов одного субъекта при заданных b и ковариатах"""

    def __init__(self, spec, params, covariates, b, bases=None):
        self.spec = spec
        self.bases = bases or spline_bases(spec)
        self.prep = prepare(params, spec)
        self.covariates = dict(covariates or {})
        self.b = np.atleast_1d(np.asarray(b, dtype=float)) if spec.q else np.zeros(0)
        self.groups = [spec.group_of(pair) for pair in spec.topology.allowed]
        offsets = self.prep.zeta.copy()
        if self.prep.gamma.size:
            offsets += spec.gamma_design(self.covariates) @ self.prep.gamma
        self.offsets = offsets

    def _arrays(self, t):
        return {name: np.full(t.shape, float(value)) for name, value in self.covariates.items()}

    def log_rates(self, k, t):
        """log lambda_k(t); k - индекс перехода с нуля"""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        prep = self.prep
        group = self.groups[k]
        value = self.bases[group].combine(t, prep.coefs[group]) + self.offsets[k]
        evaluator = self.spec.evaluator
        if prep.eta_level[k]:
            arrays = self._arrays(t)
            level = evaluator.fixed(t, arrays) @ prep.beta
            if self.b.size:
                level = level + evaluator.random(t, arrays) @ self.b
            value = value + prep.eta_level[k] * level
        if prep.eta_slope[k]:
            arrays = self._arrays(t)
            slope = evaluator.dfixed(t, arrays) @ prep.beta
            if self.b.size:
                slope = slope + evaluator.drandom(t, arrays) @ self.b
            value = value + prep.eta_slope[k] * slope
        return value

    def rates(self, k, t):
        with np.errstate(over='ignore'):
            return np.exp(self.log_rates(k, t))

    def cumulative(self, k, t0, t1, order=15):
        """Интеграл lambda_k на [t0, t1] по кускам между узлами сплайна"""
        if t1 <= t0:
            return 0.0
        breaks = self.bases[self.groups[k]].breakpoints
        inner = breaks[(breaks > t0) & (breaks < t1)]
        edges = np.concatenate([[t0], inner, [t1]])
        total = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            nodes, weights = kronrod_rule(lo, hi, order)
            total += float(weights @ self.rates(k, nodes))
        return total

    def rate_matrices(self, t):
        """Матрицы интенсивностей (n, M, M) с диагональю минус сумма строки"""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        topology = self.spec.topology
        M = topology.n_states
        out = np.zeros((t.size, M, M))
        for k, (h, j) in enumerate(topology.allowed):
            out[:, h, j] = self.rates(k, t)
        out[:, np.arange(M), np.arange(M)] = -out.sum(axis=2)
        return out
