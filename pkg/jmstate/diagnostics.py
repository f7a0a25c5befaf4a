# Графические проверки подгонки: только данные для графиков, без рисования
import numpy as np
import pandas as pd

from jmstate import log_action
from jmstate.likelihood import build_workspaces, refresh_modes
from jmstate.models import transition_label
from jmstate.msprep import expand_transitions
from jmstate.transprob import (Z95, aalen_johansen_curve, counting_panel, nelson_aalen,
                               parametric_average_curve)

RESIDUAL_COLUMNS = ['id', 'time', 'y', 'fitted', 'residual', 'standardized']
BIN_COLUMNS = ['bin', 't_lo', 't_hi', 'n', 'observed_mean', 'predicted_mean', 'lo95', 'hi95', 'flag']
GOF_COLUMNS = ['s', 't', 'from', 'to', 'parametric', 'estimate', 'lo95', 'hi95', 'covered']


def fit_workspaces(fit_result, dataset, threads=None):
    """Рабочие области с EB-модами при параметрах подгонки"""
    workspaces = fit_result.workspaces
    if workspaces is None or [ws.id for ws in workspaces] != list(dataset.subject_ids):
        workspaces = build_workspaces(dataset, fit_result.spec, threads)
        refresh_modes(fit_result.params, workspaces, fit_result.spec, threads)
    return workspaces


def conditional_residuals(fit_result, dataset, threads=None):
    """fitted = X beta + Z b_i (EB-мода), стандартизованный остаток = (y - fitted) / sigma"""
    params = fit_result.params
    workspaces = fit_workspaces(fit_result, dataset, threads)
    records = []
    for ws in workspaces:
        fitted = ws.X @ params.beta
        if ws.Z.shape[1]:
            fitted = fitted + ws.Z @ ws.mode
        for record, value in zip(dataset.records_for(ws.id), fitted):
            residual = record.y - float(value)
            records.append({'id': ws.id, 'time': record.t, 'y': record.y, 'fitted': float(value),
                            'residual': residual, 'standardized': residual / params.sigma})
    return pd.DataFrame.from_records(records, columns=RESIDUAL_COLUMNS)


def _bin_index(times, edges):
    # правая граница включительно, первый интервал включает минимум
    return np.searchsorted(edges[1:-1], times, side='left')


def observed_vs_predicted(fit_result, dataset, n_bins=10, threads=None):
    """Средние наблюдаемые и предсказанные значения по децилям моментов измерений"""
    residuals = conditional_residuals(fit_result, dataset, threads)
    if residuals.empty:
        return pd.DataFrame(columns=BIN_COLUMNS)
    times = residuals['time'].to_numpy()
    edges = np.quantile(times, np.linspace(0.0, 1.0, n_bins + 1))
    residuals['bin'] = _bin_index(times, edges)

    records = []
    for j in range(n_bins):
        members = residuals[residuals['bin'] == j]
        n = len(members)
        row = {'bin': j + 1, 't_lo': float(edges[j]), 't_hi': float(edges[j + 1]), 'n': n,
               'observed_mean': None, 'predicted_mean': None, 'lo95': None, 'hi95': None, 'flag': ""}
        if n:
            row['observed_mean'] = float(members['y'].mean())
            row['predicted_mean'] = float(members['fitted'].mean())
        if n < 2:
            row['flag'] = "few_observations"
        else:
            half = Z95 * float(members['y'].std(ddof=1)) / np.sqrt(n)
            row['lo95'] = row['observed_mean'] - half
            row['hi95'] = row['observed_mean'] + half
        records.append(row)
    return pd.DataFrame.from_records(records, columns=BIN_COLUMNS)


def band_coverage(frame):
    """Доля точек, где параметрическая оценка внутри полосы, по переходам h != k"""
    coverage = {}
    if frame.empty:
        return coverage
    usable = frame[(frame['from'] != frame['to']) & frame['covered'].notna()]
    for (h, k), group in usable.groupby(['from', 'to']):
        coverage[transition_label((int(h), int(k)))] = float(group['covered'].astype(bool).mean())
    return coverage


def transprob_gof(fit_result, dataset, grid, s=0.0, grid_size=1000, b_source="eb", threads=None):
    """Параметрическое среднее против Аалена-Йохансена с 95% полосой на общей сетке"""
    grid = np.sort(np.asarray(grid, dtype=float))
    grid = grid[grid >= s]
    if grid.size == 0:
        return pd.DataFrame(columns=GOF_COLUMNS), {}

    spec = fit_result.spec
    topology = spec.topology
    panel = counting_panel(expand_transitions(dataset, topology), topology)
    steps = nelson_aalen(panel)
    frame = aalen_johansen_curve(panel, steps, s, grid, topology)

    workspaces = fit_workspaces(fit_result, dataset, threads)
    curves = parametric_average_curve(fit_result.params, workspaces, spec, s, grid, grid_size,
                                      b_source, threads)
    position = {float(t): n for n, t in enumerate(grid)}
    frame['parametric'] = [float(curves[position[t], h, k])
                           for t, h, k in zip(frame['t'], frame['from'], frame['to'])]

    def covered(row):
        if row['lo95'] is None or pd.isna(row['lo95']):
            return None
        return bool(row['lo95'] <= row['parametric'] <= row['hi95'])

    frame['covered'] = frame.apply(covered, axis=1).astype(object)
    frame = frame[GOF_COLUMNS]
    coverage = band_coverage(frame)
    log_action("GOF", " ".join(f"{label}={value:.3f}" for label, value in coverage.items()))
    return frame, coverage
