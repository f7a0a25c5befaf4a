"""Тесты подготовки строк 'переход под риском'"""
import numpy as np
import pytest

from jmstate.errors import ValidationError
from jmstate.msprep import ROW_COLUMNS, expand_covariates, expand_transitions, rows_to_frame, upsilon_matrix


def test_expand_transitions(toy_dataset):
    rows = expand_transitions(toy_dataset)
    summary = [(r.id, r.trans, r.t_start, r.t_stop, r.status) for r in rows]
    assert summary == [
        ("1", 1, 0.0, 2.0, 1), ("1", 2, 0.0, 2.0, 0), ("1", 3, 2.0, 5.0, 1),
        ("2", 1, 0.0, 3.0, 0), ("2", 2, 0.0, 3.0, 0),
        ("3", 1, 0.0, 4.0, 0), ("3", 2, 0.0, 4.0, 1),
    ]
    assert all(r.covariates == {'X': 1.5} for r in rows if r.id == "3")


def test_one_event_per_sojourn(toy_dataset):
    rows = expand_transitions(toy_dataset)
    events = {}
    for row in rows:
        key = (row.id, row.t_start)
        events[key] = events.get(key, 0) + row.status
    assert all(count <= 1 for count in events.values())


def test_expand_covariates(toy_dataset, small_spec):
    rows = expand_transitions(toy_dataset)
    frame = expand_covariates(rows, small_spec)
    assert list(frame.columns) == ["gamma[0->1,0->2|X]"]
    np.testing.assert_allclose(frame.iloc[:, 0], [0.5, 0.5, 0.0, -1.0, -1.0, 1.5, 1.5])


def test_expand_covariates_missing(toy_dataset, small_spec):
    rows = expand_transitions(toy_dataset)
    stripped = [type(r)(r.id, r.trans, r.from_state, r.to_state, r.t_start, r.t_stop, r.status, {})
                for r in rows]
    with pytest.raises(ValidationError, match="covariate missing"):
        expand_covariates(stripped, small_spec)


def test_upsilon_matrix(toy_dataset):
    np.testing.assert_array_equal(upsilon_matrix(toy_dataset), [[1, 1, 1], [0, 0, 1], [0, 0, 2]])


def test_rows_to_frame(toy_dataset):
    frame = rows_to_frame(expand_transitions(toy_dataset), ("X",))
    assert list(frame.columns) == ROW_COLUMNS + ["X"]
    assert len(frame) == 7
    assert frame['status'].sum() == 3
