# Оценивание: инициализация, EM, квазиньютон, информационная матрица, тесты Вальда
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import chi2, norm

from jmstate import __version__, log_action, logger
from jmstate.errors import NumericalError, ValidationError
from jmstate.likelihood import (adapted_grid, build_workspaces, log_integrand, prepare,
                                refresh_modes, total_loglik, total_loglik_and_score,
                                weighted_score)
from jmstate.lmm import fit_lmm
from jmstate.params import (ModelParameters, ParameterVector, chol_from_covariance, chol_matrix, pack,
                            unpack, vech_indices)
from jmstate.workers import parallel_map

# блоки без p-значения в отчёте
NO_P_VALUE_BLOCKS = ("log_sigma", "d_chol")


@dataclass(frozen=True)
class FitControl:
    """Настройки подгонки"""
    gh_order: int = 9
    em_max: int = 30
    em_tol: float = 1e-6
    qn_max: int = 200
    qn_tol: float = 1e-5
    lmm_maxiter: int = 500
    hessian: bool = True
    threads: int = None


@dataclass
class FitResult:
    spec: object
    theta_hat: ParameterVector
    vcov: np.ndarray
    loglik: float
    se: np.ndarray
    p_values: list
    convergence: dict
    flags: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)
    workspaces: list = field(default=None, repr=False)

    @property
    def params(self):
        return unpack(self.theta_hat, self.spec)

    @property
    def names(self):
        return self.theta_hat.names

    def table(self):
        """Строки (имя, оценка, SE, p)"""
        return [
            {'name': name, 'estimate': float(value), 'se': float(se), 'p': p}
            for name, value, se, p in zip(self.names, self.theta_hat.values, self.se, self.p_values)
        ]


def place_knots(dataset, spec):
    """Граничные узлы по крайним временам пребываний, внутренние по квантилям переходов группы"""
    endpoints = [t for h in dataset.histories for t in (h.t_entry,) + tuple(h.times)]
    lower, upper = float(min(endpoints)), float(max(endpoints))
    m = spec.spline.internal_knots
    probs = np.arange(1, m + 1) / (m + 1)

    knot_vectors = []
    for group in spec.baseline_groups:
        members = set(group.transitions)
        event_times = []
        for history in dataset.histories:
            sequence = history.state_sequence()
            for r, d in enumerate(history.delta):
                if d and (sequence[r], sequence[r + 1]) in members:
                    event_times.append(history.times[r])
        source = event_times if len(event_times) >= m else endpoints
        internal = np.quantile(source, probs) if m else np.zeros(0)
        points = np.concatenate([[lower], internal, [upper]])
        if np.any(np.diff(points) <= 0):
            # совпадающие квантили: равномерная сетка
            points = np.linspace(lower, upper, m + 2)
        knot_vectors.append(tuple(float(x) for x in points))
    log_action("KNOTS_PLACED", f"groups={len(knot_vectors)} span=({lower:.4f}, {upper:.4f})")
    return spec.with_knots(knot_vectors)


# Инициализация мультисостояний при eta = 0

def _pooled_multistate(workspaces, spec):
    """Общая линейная модель log lambda = A theta_ms по всем строкам"""
    layout = spec.layout
    pairs = spec.topology.allowed
    n_gamma = len(spec.per_transition_covariates)
    n_zeta = len(layout.zeta_pairs)
    n_groups = len(spec.baseline_groups)
    width = n_gamma + n_zeta + n_groups * spec.n_basis
    blocks, weights, events, trans = [], [], [], []
    zeta_column = {pairs.index(pair): j for j, pair in enumerate(layout.zeta_pairs)}
    for ws in workspaces:
        n = ws.row_times.size
        if n == 0:
            continue
        A = np.zeros((n, width))
        if n_gamma:
            A[:, :n_gamma] = ws.gamma_design[ws.row_trans]
        for row, k in enumerate(ws.row_trans):
            if k in zeta_column:
                A[row, n_gamma + zeta_column[k]] = 1.0
        offset = n_gamma + n_zeta
        for g in range(n_groups):
            mask = ws.row_group == g
            A[mask, offset + g * spec.n_basis: offset + (g + 1) * spec.n_basis] = ws.B_rows[mask]
        blocks.append(A)
        weights.append(ws.row_weight)
        events.append(ws.row_event)
        trans.append(ws.row_trans)
    if not blocks:
        return np.zeros((0, width)), np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0, dtype=int)
    return np.vstack(blocks), np.concatenate(weights), np.concatenate(events), np.concatenate(trans)


def init_multistate(workspaces, spec, maxiter=500):
    """(gamma, zeta, сплайны) по правдоподобию мультисостояний без связи с маркером"""
    A, w, event, trans = _pooled_multistate(workspaces, spec)
    layout = spec.layout
    n_gamma = len(spec.per_transition_covariates)
    n_zeta = len(layout.zeta_pairs)
    pairs = spec.topology.allowed
    K = len(pairs)

    # старт: логарифм частоты событий эталонного перехода каждой группы
    n_events = np.bincount(trans[event], minlength=K).astype(float)
    exposure = np.bincount(trans[~event], weights=w[~event], minlength=K)
    start = np.zeros(A.shape[1])
    for g, group in enumerate(spec.baseline_groups):
        k = pairs.index(group.reference)
        rate = max(n_events[k], 0.5) / max(exposure[k], 1e-8)
        offset = n_gamma + n_zeta + g * spec.n_basis
        start[offset: offset + spec.n_basis] = math.log(rate)
        for pair in group.transitions[1:]:
            j = pairs.index(pair)
            ratio = (max(n_events[j], 0.5) / max(exposure[j], 1e-8)) / rate
            start[n_gamma + layout.zeta_pairs.index(pair)] = math.log(ratio)

    def objective(theta):
        eta = A @ theta
        with np.errstate(over='ignore'):
            lam = np.exp(eta)
        value = eta[event].sum() - (w[~event] * lam[~event]).sum()
        factor = np.where(event, 1.0, -w * lam)
        return -value, -(A.T @ factor)

    result = minimize(objective, start, jac=True, method='BFGS', options={'maxiter': maxiter, 'gtol': 1e-6})
    theta = result.x
    coefs = tuple(theta[n_gamma + n_zeta + g * spec.n_basis: n_gamma + n_zeta + (g + 1) * spec.n_basis]
                  for g in range(len(spec.baseline_groups)))
    log_action("MS_INIT", f"loglik={-result.fun:.6f} iterations={result.nit}")
    return theta[:n_gamma], theta[n_gamma:n_gamma + n_zeta], coefs


def initial_parameters(dataset, spec, workspaces, control):
    lmm = fit_lmm(dataset, spec, maxiter=control.lmm_maxiter, threads=control.threads)
    gamma, zeta, coefs = init_multistate(workspaces, spec)
    params = ModelParameters(beta=lmm.beta, log_sigma=lmm.log_sigma, d_chol=lmm.d_chol,
                             gamma=gamma, zeta=zeta, eta=np.zeros(len(spec.layout.eta_terms)),
                             spline_coefs=coefs)
    return params, lmm


# EM

def _qn_block(spec):
    """Индексы (beta, gamma, zeta, eta, сплайны) в упакованном векторе"""
    slices = spec.layout.slices
    return np.concatenate([np.arange(slices[b].start, slices[b].stop)
                           for b in ('beta', 'gamma', 'zeta', 'eta', 'spline')])


def e_step(params, workspaces, spec, gh_order, threads=None):
    """Узлы и апостериорные веса по субъектам"""
    prep = prepare(params, spec)

    def compute(ws):
        grid = adapted_grid(ws, spec, gh_order, params)
        values = log_integrand(prep, ws, grid.nodes) + grid.log_weights
        if not np.any(np.isfinite(values)):
            raise NumericalError("posterior moment underflow", {'id': ws.id})
        return grid.nodes, np.exp(values - logsumexp(values))

    return parallel_map(compute, workspaces, threads)


def em_iteration(params, workspaces, spec, gh_order=None, threads=None):
    """Один шаг EM: D и sigma в замкнутой форме, остальное одним квазиньютоновским шагом"""
    gh_order = gh_order or spec.quadrature.gh_order
    posterior = e_step(params, workspaces, spec, gh_order, threads)
    vector = pack(params, spec).values
    block = _qn_block(spec)

    def negative_q(sub):
        theta = vector.copy()
        theta[block] = sub
        try:
            prep = prepare(theta, spec)
        except NumericalError:
            return 1e300, np.zeros(block.size)
        value, grad = 0.0, np.zeros(vector.size)
        for ws, (nodes, pi) in zip(workspaces, posterior):
            v, g = weighted_score(prep, ws, spec, nodes, pi)
            value += v
            grad += g
        if not np.isfinite(value):
            return 1e300, np.zeros(block.size)
        return -value, -grad[block]

    start_value, _ = negative_q(vector[block])
    result = minimize(negative_q, vector[block], jac=True, method='BFGS', options={'maxiter': 1})
    theta = vector.copy()
    if result.fun <= start_value:
        theta[block] = result.x
    updated = unpack(theta, spec)

    # замкнутые формы: D по вторым моментам, sigma по остаткам с новым beta
    q = spec.q
    if q:
        second = sum((nodes * pi[:, None]).T @ nodes for nodes, pi in posterior) / len(workspaces)
        second = 0.5 * (second + second.T)
        try:
            updated.d_chol = chol_from_covariance(second)
        except ValidationError:
            updated.d_chol = chol_from_covariance(second + 1e-10 * np.eye(q))
    sq, n_obs = 0.0, 0
    for ws, (nodes, pi) in zip(workspaces, posterior):
        resid = ws.y[:, None] - (ws.X @ updated.beta)[:, None] - ws.Z @ nodes.T
        sq += float(pi @ (resid ** 2).sum(axis=0))
        n_obs += ws.y.size
    if n_obs and sq > 0:
        updated.log_sigma = 0.5 * math.log(sq / n_obs)
    return updated


# Информационная матрица

def numerical_hessian(func, theta, grad=None, threads=None):
    """Гессиан центральными разностями, шаг h_j = max(1e-4, 1e-4 |theta_j|)"""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    steps = np.maximum(1e-4, 1e-4 * np.abs(theta))

    if grad is not None:
        def column(j):
            e = np.zeros(n)
            e[j] = steps[j]
            return (grad(theta + e) - grad(theta - e)) / (2.0 * steps[j])
        H = np.column_stack(parallel_map(column, range(n), threads)) if n else np.zeros((0, 0))
    else:
        f0 = func(theta)

        def entry(pair):
            i, j = pair
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = steps[i]
            ej[j] = steps[j]
            if i == j:
                return (func(theta + ei) - 2.0 * f0 + func(theta - ei)) / steps[i] ** 2
            return (func(theta + ei + ej) - func(theta + ei - ej) - func(theta - ei + ej)
                    + func(theta - ei - ej)) / (4.0 * steps[i] * steps[j])
        pairs = [(i, j) for i in range(n) for j in range(i, n)]
        values = parallel_map(entry, pairs, threads)
        H = np.zeros((n, n))
        for (i, j), value in zip(pairs, values):
            H[i, j] = H[j, i] = value
    return 0.5 * (H + H.T)


def observed_information(theta_hat, workspaces, spec, gh_order=None, threads=None):
    """Минус гессиан логарифма правдоподобия"""
    values = theta_hat.values if isinstance(theta_hat, ParameterVector) else np.asarray(theta_hat)

    def score(theta):
        return total_loglik_and_score(theta, workspaces, spec, gh_order, threads)[1]

    return -numerical_hessian(None, values, grad=score)


def covariance_from_information(information):
    """Обратная информационная матрица; проекция на PSD при необходимости"""
    flags = []
    information = 0.5 * (information + information.T)
    try:
        vcov = np.linalg.inv(information)
    except np.linalg.LinAlgError:
        vcov = np.linalg.pinv(information)
        flags.append("hessian_singular")
    vcov = 0.5 * (vcov + vcov.T)
    eigenvalues, vectors = np.linalg.eigh(vcov)
    if np.any(eigenvalues < 0):
        logger.warning("Inverse information is not positive semi-definite; projecting")
        flags.append("hessian_not_psd")
        vcov = (vectors * np.clip(eigenvalues, 0.0, None)) @ vectors.T
        vcov = 0.5 * (vcov + vcov.T)
    return vcov, flags


def parameter_p_values(spec, values, se):
    layout = spec.layout
    result = []
    for index, (value, s) in enumerate(zip(values, se)):
        if layout.block_of(index) in NO_P_VALUE_BLOCKS or not s > 0:
            result.append(None)
        else:
            result.append(float(2.0 * norm.sf(abs(value / s))))
    return result


# Подгонка

def fit(dataset, spec, control=None):
    """EM, затем BFGS; результат с лучшим правдоподобием из двух фаз"""
    control = control or FitControl()
    gh_order = control.gh_order
    spec = spec.with_quadrature(gh_order=gh_order)
    if not spec.knots_placed:
        spec = place_knots(dataset, spec)
    workspaces = build_workspaces(dataset, spec, control.threads)

    params, lmm = initial_parameters(dataset, spec, workspaces, control)
    refresh_modes(params, workspaces, spec, control.threads)
    loglik = total_loglik(params, workspaces, spec, gh_order, control.threads)
    if not np.isfinite(loglik):
        raise NumericalError("non-finite log-likelihood at initialization")
    log_action("FIT_START", f"subjects={len(workspaces)} parameters={spec.layout.size} loglik={loglik:.6f}")

    em_trace = [loglik]
    em_converged = False
    for step in range(control.em_max):
        params = em_iteration(params, workspaces, spec, gh_order, control.threads)
        current = total_loglik(params, workspaces, spec, gh_order, control.threads)
        em_trace.append(current)
        log_action("EM_STEP", f"step={step + 1} loglik={current:.6f}")
        if abs(current - em_trace[-2]) <= control.em_tol * max(1.0, abs(current)):
            em_converged = True
            break

    refresh_modes(params, workspaces, spec, control.threads)
    em_params = params
    em_loglik = total_loglik(params, workspaces, spec, gh_order, control.threads)

    def negative(theta):
        try:
            value, grad = total_loglik_and_score(theta, workspaces, spec, gh_order, control.threads)
        except NumericalError:
            return 1e300, np.zeros(theta.size)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return 1e300, np.zeros(theta.size)
        return -value, -grad

    start = pack(em_params, spec).values
    result = minimize(negative, start, jac=True, method='BFGS',
                      options={'gtol': control.qn_tol, 'maxiter': control.qn_max})
    qn_loglik = -float(result.fun)
    log_action("QN_DONE", f"loglik={qn_loglik:.6f} iterations={result.nit} success={result.success}")

    if qn_loglik >= em_loglik:
        best, best_loglik, phase = result.x, qn_loglik, "qn"
    else:
        best, best_loglik, phase = start, em_loglik, "em"
    theta_hat = ParameterVector(np.asarray(best, dtype=float), spec.layout.names)
    grad_norm = float(np.max(np.abs(result.jac))) if result.jac is not None and result.jac.size else 0.0

    flags = list(lmm.flags)
    if any(ws.mode_fallback for ws in workspaces):
        flags.append("eb_fallback")
    if not result.success:
        flags.append("not_converged")
        logger.warning(f"Quasi-Newton phase did not converge: {result.message}")

    n = theta_hat.values.size
    if control.hessian:
        information = observed_information(theta_hat, workspaces, spec, gh_order, control.threads)
        vcov, hessian_flags = covariance_from_information(information)
        flags.extend(hessian_flags)
    else:
        vcov = np.full((n, n), np.nan)
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    p_values = parameter_p_values(spec, theta_hat.values, se)

    # моды для остатков и предсказаний при итоговых параметрах; гессиан считан на прежней сетке
    fallbacks = refresh_modes(unpack(theta_hat, spec), workspaces, spec, control.threads)
    if fallbacks and "eb_fallback" not in flags:
        flags.append("eb_fallback")

    convergence = {
        'converged': bool(result.success),
        'iterations': int(result.nit),
        'grad_norm': grad_norm,
        'phase': phase,
        'em_steps': len(em_trace) - 1,
        'em_converged': em_converged,
        'em_trace': [float(v) for v in em_trace],
        'em_loglik': float(em_loglik),
        'qn_steps': int(result.nit),
        'qn_loglik': qn_loglik,
        'lmm_loglik': float(lmm.loglik),
    }
    settings = {
        'gh_order': gh_order, 'em_max': control.em_max, 'em_tol': control.em_tol,
        'qn_max': control.qn_max, 'qn_tol': control.qn_tol,
        'gk_order': spec.quadrature.gk_order, 'gk_panels': spec.quadrature.gk_panels,
    }
    log_action("FIT_DONE", f"loglik={best_loglik:.6f} phase={phase} flags={flags}")
    return FitResult(spec=spec, theta_hat=theta_hat, vcov=vcov, loglik=best_loglik, se=se,
                     p_values=p_values, convergence=convergence, flags=flags, settings=settings,
                     workspaces=workspaces)


# Тесты Вальда

def contrast(fit_or_spec, terms):
    """Матрица контрастов по именам параметров (включая алиасы общих коэффициентов)"""
    spec = getattr(fit_or_spec, 'spec', fit_or_spec)
    layout = spec.layout
    rows = []
    for term in terms:
        row = np.zeros(layout.size)
        weights = {term: 1.0} if isinstance(term, str) else term
        for name, weight in weights.items():
            row[layout.index_of(name)] += float(weight)
        rows.append(row)
    return np.array(rows).reshape(len(rows), layout.size)


def wald_test(fit_result, contrast_matrix, null=None):
    """(L theta - null)' (L V L')^-1 (L theta - null) ~ chi2(rank L)"""
    values = fit_result.theta_hat.values
    L = np.atleast_2d(np.asarray(contrast_matrix, dtype=float))
    if L.shape[1] != values.size:
        raise ValidationError("contrast columns do not match the parameter vector",
                              {'expected': values.size, 'got': L.shape[1]})
    null = np.zeros(L.shape[0]) if null is None else np.atleast_1d(np.asarray(null, dtype=float))
    zero_rows = np.flatnonzero(~np.any(L != 0, axis=1))
    if L.shape[0] == 0 or zero_rows.size:
        raise ValidationError("contrast has zero rows", {'rows': zero_rows.tolist()})
    if null.size != L.shape[0]:
        raise ValidationError("null value does not match the contrast rows",
                              {'expected': int(L.shape[0]), 'got': int(null.size)})
    diff = L @ values - null
    middle = L @ fit_result.vcov @ L.T
    try:
        statistic = float(diff @ np.linalg.solve(middle, diff))
    except np.linalg.LinAlgError:
        raise NumericalError("singular contrast covariance") from None
    dof = int(L.shape[0])
    return statistic, dof, float(chi2.sf(statistic, dof))


def random_effects_table(fit_result):
    """Элементы D с SE дельта-методом"""
    spec = fit_result.spec
    q = spec.q
    layout = spec.layout
    part = layout.slices['d_chol']
    d_chol = fit_result.theta_hat.values[part]
    V = fit_result.vcov[part, part]
    L = chol_matrix(d_chol)
    D = L @ L.T
    index = {pair: n for n, pair in enumerate(vech_indices(q))}
    rows = []
    for i, j in vech_indices(q):
        grad = np.zeros(len(d_chol))
        # D_ij = sum_k L_ik L_jk, k <= j
        for k in range(j + 1):
            for (a, b), other in (((i, k), (j, k)), ((j, k), (i, k))):
                n = index[(a, b)]
                factor = L[a, b] if a == b else 1.0
                grad[n] += factor * L[other]
        se = float(np.sqrt(max(grad @ V @ grad, 0.0))) if np.all(np.isfinite(V)) else float('nan')
        rows.append({'name': f"D[{i + 1},{j + 1}]", 'estimate': float(D[i, j]), 'se': se})
    return rows


# Документ подгонки

def fit_document(fit_result, config_echo=None):
    from jmstate.config import spec_to_dict
    return {
        'version': __version__,
        'config': config_echo or {},
        'spec': spec_to_dict(fit_result.spec),
        'loglik': fit_result.loglik,
        'convergence': fit_result.convergence,
        'settings': fit_result.settings,
        'parameters': fit_result.table(),
        'random_effects': random_effects_table(fit_result),
        'vcov': [float(v) for v in np.asarray(fit_result.vcov).ravel()],
        'flags': list(fit_result.flags),
    }


def save_fit(fit_result, path, config_echo=None):
    document = fit_document(fit_result, config_echo)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(document, handle, indent=2, allow_nan=True)
    log_action("FILE_WRITTEN", str(path))
    return document


def load_fit(path):
    """Восстановление FitResult из документа (без рабочих областей)"""
    from jmstate.config import spec_from_dict
    try:
        with open(path, encoding='utf-8') as handle:
            document = json.load(handle)
    except (OSError, json.JSONDecodeError) as error:
        raise ValidationError(f"cannot read fit document: {error}", {'path': str(path)}) from None
    spec = spec_from_dict(document['spec'])
    names = tuple(p['name'] for p in document['parameters'])
    if names != spec.layout.names:
        raise ValidationError("fit document parameters do not match its model")
    values = np.array([p['estimate'] for p in document['parameters']], dtype=float)
    n = values.size
    vcov = np.array(document['vcov'], dtype=float).reshape(n, n)
    se = np.array([p['se'] for p in document['parameters']], dtype=float)
    return FitResult(spec=spec, theta_hat=ParameterVector(values, names), vcov=vcov,
                     loglik=float(document['loglik']), se=se,
                     p_values=[p['p'] for p in document['parameters']],
                     convergence=document.get('convergence', {}), flags=document.get('flags', []),
                     settings=document.get('settings', {}))
