# Вероятности переходов: Нельсон-Аален, Аален-Йохансен, Гринвуд, параметрическая оценка
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from jmstate import log_action
from jmstate.errors import NumericalError, ValidationError
from jmstate.likelihood import IntensityFunction, empirical_bayes_mode, spline_bases
from jmstate.numerics import StepFunctionMatrix, product_integral
from jmstate.workers import parallel_map

Z95 = 1.96
B_SOURCES = ("eb", "zero")


@dataclass(frozen=True, eq=False)
class CountingProcessPanel:
    """Моменты событий, приращения N_hk и число под риском Y_h непосредственно перед t"""
    times: np.ndarray
    dN: np.ndarray
    at_risk: np.ndarray

    @property
    def n_states(self):
        return self.dN.shape[1]

    def counts(self):
        """Суммарные N_hk"""
        return self.dN.sum(axis=0)


def counting_panel(rows, topology):
    """Панель по строкам переходов под риском"""
    M = topology.n_states
    sojourns = {}
    events = []
    for row in rows:
        sojourns[(row.id, row.from_state, row.t_start, row.t_stop)] = row.from_state
        if row.status:
            events.append((row.t_stop, row.from_state, row.to_state))

    times = np.unique([e[0] for e in events]) if events else np.zeros(0)
    dN = np.zeros((times.size, M, M))
    for t, h, k in events:
        dN[np.searchsorted(times, t), h, k] += 1

    at_risk = np.zeros((times.size, M))
    for h in range(M):
        members = [key for key, state in sojourns.items() if state == h]
        if not members:
            continue
        starts = np.sort([key[2] for key in members])
        stops = np.sort([key[3] for key in members])
        # t_start < t <= t_stop
        at_risk[:, h] = np.searchsorted(starts, times, side='left') - np.searchsorted(stops, times, side='left')
    return CountingProcessPanel(times, dN, at_risk)


def nelson_aalen(panel):
    """Приращения dN_hk / Y_h, диагональ минус сумма строки"""
    M = panel.n_states
    increments = np.zeros_like(panel.dN)
    for j in range(panel.times.size):
        for h in range(M):
            leaving = panel.dN[j, h].sum()
            if leaving == 0:
                continue
            risk = panel.at_risk[j, h]
            if risk <= 0:
                raise NumericalError("events without subjects at risk", {'time': float(panel.times[j])})
            increments[j, h] = panel.dN[j, h] / risk
            increments[j, h, h] = -leaving / risk
    return StepFunctionMatrix(panel.times.copy(), increments)


def aalen_johansen(steps, s, t):
    """P*(s, t) как произведение (I + dL) по (s, t]"""
    return product_integral(steps, s, t)


def _vec_index(h, k, M):
    # vec по столбцам
    return k * M + h


def _increment_covariance(panel, j):
    """Ковариация vec(dL) в момент j: блоки по исходному состоянию"""
    M = panel.n_states
    cov = np.zeros((M * M, M * M))
    for h in range(M):
        risk = panel.at_risk[j, h]
        n = panel.dN[j, h].copy()
        n[h] = 0.0
        if risk <= 0 or n.sum() == 0:
            continue
        off = (risk * np.diag(n) - np.outer(n, n)) / risk ** 3
        T = np.eye(M)
        T[h, :] -= 1.0
        block = T @ off @ T.T
        index = [_vec_index(h, k, M) for k in range(M)]
        cov[np.ix_(index, index)] = block
    return cov


def greenwood_cov(panel, steps, s, t):
    """Ковариация vec(P*(s, t)) рекурсией типа Гринвуда"""
    M = panel.n_states
    identity = np.eye(M)
    P = identity.copy()
    cov = np.zeros((M * M, M * M))
    for j in steps.window(s, t):
        delta = steps.increments[j]
        A = np.kron((identity + delta).T, identity)
        B = np.kron(identity, P)
        cov = A @ cov @ A.T + B @ _increment_covariance(panel, j) @ B.T
        P = P @ (identity + delta)
    return 0.5 * (cov + cov.T)


def aj_confidence_interval(estimate, variance):
    """95% интервал на лог-шкале, верхняя граница не выше 1; (None, None) при нулевой оценке"""
    if not estimate > 0:
        return None, None
    spread = Z95 * math.sqrt(max(variance, 0.0)) / estimate
    return math.exp(math.log(estimate) - spread), min(1.0, math.exp(math.log(estimate) + spread))


def reachable_pairs(topology):
    return [(h, k) for h in range(topology.n_states) if h not in topology.absorbing
            for k in sorted(topology.reachable(h))]


def aalen_johansen_curve(panel, steps, s, times, topology):
    """Оценки P*(s, t), дисперсии и полосы для набора t за один проход"""
    M = panel.n_states
    identity = np.eye(M)
    targets = np.sort(np.asarray(times, dtype=float))
    if targets.size and targets[0] < s:
        raise ValidationError("curve times must not precede s", {'s': s})
    pairs = reachable_pairs(topology)
    P = identity.copy()
    cov = np.zeros((M * M, M * M))
    jumps = steps.window(s, targets[-1]) if targets.size else np.zeros(0, dtype=int)
    records = []
    position = 0

    def emit(t):
        for h, k in pairs:
            estimate = float(P[h, k])
            variance = float(cov[_vec_index(h, k, M), _vec_index(h, k, M)])
            lo, hi = aj_confidence_interval(estimate, variance)
            records.append({'s': s, 't': float(t), 'from': h, 'to': k, 'estimate': estimate,
                            'var': variance, 'lo95': lo, 'hi95': hi})

    for t in targets:
        while position < jumps.size and steps.jump_times[jumps[position]] <= t:
            j = jumps[position]
            delta = steps.increments[j]
            A = np.kron((identity + delta).T, identity)
            B = np.kron(identity, P)
            cov = A @ cov @ A.T + B @ _increment_covariance(panel, j) @ B.T
            P = P @ (identity + delta)
            position += 1
        emit(t)
    return pd.DataFrame.from_records(records, columns=['s', 't', 'from', 'to', 'estimate', 'var', 'lo95', 'hi95'])


# Параметрическая оценка

def _subject_b(params, ws, spec, b_source):
    if b_source not in B_SOURCES:
        raise ValidationError(f"unknown b_source '{b_source}'", {'choices': B_SOURCES})
    if b_source == "zero" or spec.q == 0:
        return np.zeros(spec.q)
    if ws.mode is None:
        ws.mode, ws.scale, ws.mode_fallback = empirical_bayes_mode(params, ws, spec)
    return ws.mode


def parametric_curve(params, ws, spec, b_source, s, times, grid_size=1000, bases=None):
    """P(s, t) для нескольких t по общей сетке; шаг I + dL + dL^2/2 в средних точках"""
    targets = np.asarray(times, dtype=float)
    if targets.size and np.min(targets) < s:
        raise ValidationError("s must not exceed t", {'s': s, 't': float(np.min(targets))})
    M = spec.topology.n_states
    identity = np.eye(M)
    if targets.size == 0:
        return np.zeros((0, M, M))
    intensity = IntensityFunction(spec, params, ws.covariates, _subject_b(params, ws, spec, b_source), bases)
    t_max = float(np.max(targets))
    if t_max == s:
        return np.repeat(identity[None], targets.size, axis=0)

    grid = np.union1d(np.linspace(s, t_max, grid_size + 1), targets[targets > s])
    widths = np.diff(grid)
    mids = 0.5 * (grid[1:] + grid[:-1])
    rates = intensity.rate_matrices(mids) * widths[:, None, None]
    factors = identity + rates + 0.5 * rates @ rates

    order = np.argsort(targets)
    out = np.zeros((targets.size, M, M))
    P = identity.copy()
    position = 0
    for index in order:
        t = targets[index]
        while position < widths.size and grid[position + 1] <= t:
            P = P @ factors[position]
            position += 1
        out[index] = P
    return out


def parametric_transprob_individual(params, ws, spec, b_source="eb", s=0.0, t=1.0, grid_size=1000):
    """P^i(s, t | theta) для одного субъекта"""
    if t < s:
        raise ValidationError("s must not exceed t", {'s': s, 't': t})
    return parametric_curve(params, ws, spec, b_source, s, [t], grid_size)[0]


def parametric_average_curve(params, workspaces, spec, s, times, grid_size=1000, b_source="eb", threads=None):
    """Среднее индивидуальных кривых"""
    bases = spline_bases(spec)

    def compute(ws):
        return parametric_curve(params, ws, spec, b_source, s, times, grid_size, bases)

    curves = parallel_map(compute, workspaces, threads)
    log_action("PARAMETRIC_CURVE", f"subjects={len(workspaces)} points={len(times)} b_source={b_source}")
    return np.mean(curves, axis=0)


def parametric_transprob_average(params, workspaces, spec, s, t, grid_size=1000, b_source="eb", threads=None):
    if t < s:
        raise ValidationError("s must not exceed t", {'s': s, 't': t})
    return parametric_average_curve(params, workspaces, spec, s, [t], grid_size, b_source, threads)[0]


def curve_frame(s, times, matrices, topology):
    """Кривые в табличный вид s, t, from, to, estimate"""
    records = []
    for t, P in zip(times, matrices):
        for h, k in reachable_pairs(topology):
            records.append({'s': s, 't': float(t), 'from': h, 'to': k, 'estimate': float(P[h, k])})
    return pd.DataFrame.from_records(records, columns=['s', 't', 'from', 'to', 'estimate'])
