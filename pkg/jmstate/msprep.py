# Подготовка данных: строки "переход под риском"
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from jmstate import log_action
from jmstate.errors import ValidationError

ROW_COLUMNS = ["id", "from", "to", "trans", "Tstart", "Tstop", "status"]


@dataclass(frozen=True)
class TransitionRow:
    """Одна строка на каждый возможный переход в пребывании"""
    id: str
    trans: int
    from_state: int
    to_state: int
    t_start: float
    t_stop: float
    status: int
    covariates: dict = field(default_factory=dict)


def expand_transitions(dataset, topology=None):
    """Истории -> строки по переходам под риском, порядок (субъект, t_start, trans)"""
    topology = topology or dataset.topology
    rows = []
    for history in dataset.histories:
        covariates = dataset.baseline_covariates(history.id)
        for state, start, stop, target in history.sojourns():
            for h, k in topology.outgoing(state):
                rows.append(TransitionRow(
                    id=history.id,
                    trans=topology.index(h, k),
                    from_state=h,
                    to_state=k,
                    t_start=start,
                    t_stop=stop,
                    status=int(target == k),
                    covariates=covariates,
                ))
    return rows


def expand_covariates(rows, spec):
    """Столбец на каждую общую ковариату: значение на своих переходах, иначе 0"""
    topology = spec.topology
    shared = spec.per_transition_covariates
    matrix = np.zeros((len(rows), len(shared)))
    for j, entry in enumerate(shared):
        indices = {topology.index(*pair) for pair in entry.transitions}
        for i, row in enumerate(rows):
            if entry.covariate not in row.covariates:
                raise ValidationError("covariate missing on row",
                                      {'id': row.id, 'covariate': entry.covariate})
            if row.trans in indices:
                matrix[i, j] = float(row.covariates[entry.covariate])
    return pd.DataFrame(matrix, columns=[entry.label() for entry in shared])


def upsilon_matrix(dataset):
    """Вне диагонали - число прямых переходов, на диагонали - число субъектов в конечном состоянии"""
    M = dataset.topology.n_states
    counts = np.zeros((M, M), dtype=int)
    for history in dataset.histories:
        sequence = history.state_sequence()
        for r, d in enumerate(history.delta):
            if d:
                counts[sequence[r], sequence[r + 1]] += 1
        counts[history.final_state, history.final_state] += 1
    return counts


def rows_to_frame(rows, covariate_names=()):
    """Строки в табличный вид id, from, to, trans, Tstart, Tstop, status, ковариаты"""
    records = []
    for row in rows:
        record = {
            'id': row.id, 'from': row.from_state, 'to': row.to_state, 'trans': row.trans,
            'Tstart': row.t_start, 'Tstop': row.t_stop, 'status': row.status,
        }
        for name in covariate_names:
            record[name] = row.covariates.get(name, np.nan)
        records.append(record)
    frame = pd.DataFrame.from_records(records, columns=ROW_COLUMNS + list(covariate_names))
    log_action("ROWS_EXPANDED", f"rows={len(frame)}")
    return frame
