# Чтение и запись CSV: продольные данные и истории переходов
import pandas as pd

from jmstate import log_action
from jmstate.errors import ValidationError
from jmstate.models import LongitudinalRecord, SubjectHistory

LONGITUDINAL_COLUMNS = ("id", "time", "y")
HISTORY_COLUMNS = ("id", "time", "state")


def _read_csv(path, required):
    """Чтение CSV с проверкой обязательных столбцов"""
    try:
        frame = pd.read_csv(path, dtype={'id': str}, skipinitialspace=True)
    except FileNotFoundError:
        raise ValidationError("file not found", {'path': str(path)}) from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as error:
        raise ValidationError(f"malformed CSV: {error}", {'path': str(path)}) from None

    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValidationError("missing columns", {'path': str(path), 'columns': missing})
    if frame['id'].isna().any():
        line = int(frame.index[frame['id'].isna()][0]) + 2
        raise ValidationError(f"empty id on line {line}", {'path': str(path), 'line': line})
    return frame


def _numeric(frame, column, path):
    """Числовой столбец; первая нечисловая строка попадает в сообщение"""
    values = pd.to_numeric(frame[column], errors='coerce')
    bad = values.isna()
    if bad.any():
        line = int(frame.index[bad][0]) + 2
        raise ValidationError(f"non-numeric {column} on line {line}",
                              {'path': str(path), 'line': line, 'column': column})
    return values


def read_longitudinal_csv(path):
    """id, time, y, затем ковариаты"""
    frame = _read_csv(path, LONGITUDINAL_COLUMNS)
    covariates = [c for c in frame.columns if c not in LONGITUDINAL_COLUMNS]
    frame['time'] = _numeric(frame, 'time', path)
    frame['y'] = _numeric(frame, 'y', path)
    for name in covariates:
        frame[name] = _numeric(frame, name, path)

    records = [
        LongitudinalRecord(str(row['id']), float(row['time']), float(row['y']),
                           {name: float(row[name]) for name in covariates})
        for row in frame.to_dict('records')
    ]
    log_action("CSV_READ", f"longitudinal rows={len(records)} path={path}")
    return records


def read_history_csv(path):
    """id, time, state: строка входа, строка на каждое новое состояние, строка цензурирования"""
    frame = _read_csv(path, HISTORY_COLUMNS)
    frame['time'] = _numeric(frame, 'time', path)
    states = _numeric(frame, 'state', path)
    if (states != states.round()).any():
        line = int(frame.index[states != states.round()][0]) + 2
        raise ValidationError(f"non-integer state on line {line}", {'path': str(path), 'line': line})
    frame['state'] = states.astype(int)

    histories = []
    for subject_id, group in frame.groupby('id', sort=False):
        histories.append(SubjectHistory.from_events(subject_id, group['time'].tolist(),
                                                    group['state'].tolist()))
    log_action("CSV_READ", f"histories={len(histories)} path={path}")
    return histories


def longitudinal_frame(records):
    covariates = sorted({name for r in records for name in r.covariates})
    return pd.DataFrame.from_records(
        [dict({'id': r.id, 'time': r.t, 'y': r.y}, **r.covariates) for r in records],
        columns=list(LONGITUDINAL_COLUMNS) + covariates,
    )


def history_frame(histories):
    rows = [{'id': h.id, 'time': t, 'state': s} for h in histories for t, s in h.event_rows()]
    return pd.DataFrame.from_records(rows, columns=list(HISTORY_COLUMNS))


def write_longitudinal_csv(records, path):
    longitudinal_frame(records).to_csv(path, index=False, float_format="%.12g")
    log_action("FILE_WRITTEN", str(path))


def write_history_csv(histories, path):
    history_frame(histories).to_csv(path, index=False, float_format="%.12g")
    log_action("FILE_WRITTEN", str(path))
