"""Тесты доменных типов и проверки данных"""
import pytest

from jmstate.errors import ValidationError
from jmstate.models import LongitudinalRecord, SubjectHistory, TransitionTopology, validate_dataset


def test_illness_death_topology(illness_death):
    assert illness_death.n_transitions == 3
    assert illness_death.absorbing == frozenset({2})
    assert illness_death.index(0, 2) == 2
    assert illness_death.pair(3) == (1, 2)
    assert illness_death.reachable(1) == frozenset({1, 2})
    assert illness_death.outgoing(0) == ((0, 1), (0, 2))
    with pytest.raises(ValidationError, match="transition not allowed"):
        illness_death.index(1, 0)


def test_topology_from_transition_matrix(illness_death):
    rebuilt = TransitionTopology.from_tmat(illness_death.tmat())
    assert rebuilt == illness_death
    with pytest.raises(ValidationError):
        TransitionTopology.from_tmat([[None, 2], [None, None]])


def test_history_from_events(toy_histories):
    moved, censored, absorbed = toy_histories
    assert moved.sojourns() == [(0, 0.0, 2.0, 1), (1, 2.0, 5.0, 2)]
    assert moved.delta == (1, 1)
    assert moved.censor_time is None
    assert censored.delta == (0,)
    assert censored.censor_time == 3.0
    assert censored.sojourns() == [(0, 0.0, 3.0, None)]
    assert absorbed.final_state == 2
    assert moved.event_rows() == [(0.0, 0), (2.0, 1), (5.0, 2)]


def test_validate_dataset_keeps_order(toy_dataset):
    assert toy_dataset.subject_ids == ("1", "2", "3")
    assert toy_dataset.covariate_names == ("X",)
    assert [r.t for r in toy_dataset.records_for("2")] == [0.0, 1.5, 3.0]
    assert toy_dataset.baseline_covariates("3") == {'X': 1.5}
    subset = toy_dataset.subset(["3", "1"])
    assert subset.subject_ids == ("3", "1")
    assert len(subset.longitudinal) == 6


@pytest.mark.parametrize("times, states, message", [
    ([0.0, 2.0, 2.0], [0, 1, 2], "non-increasing times"),
    ([0.0, 1.0, 3.0], [0, 1, 0], "transition not allowed"),
    ([0.0, 1.0, 2.0, 3.0], [0, 0, 1, 1], "repeated state before the last time"),
    ([0.0, 1.0, 2.0], [0, 2, 2], "rows after absorption"),
    ([0.0, 1.0], [0, 1], "missing censoring row"),
])
def test_invalid_histories(illness_death, times, states, message):
    history = SubjectHistory.from_events("9", times, states)
    records = [LongitudinalRecord("9", 0.0, 1.0)]
    with pytest.raises(ValidationError, match=message):
        validate_dataset(records, [history], illness_death)


def test_longitudinal_after_last_time(toy_records, toy_histories, illness_death):
    records = toy_records + [LongitudinalRecord("2", 10.0, 1.0, {'X': -1.0})]
    with pytest.raises(ValidationError, match="longitudinal time after last event time"):
        validate_dataset(records, toy_histories, illness_death)


def test_unknown_covariate_column(toy_records, toy_histories, illness_death):
    with pytest.raises(ValidationError, match="unknown covariate column"):
        validate_dataset(toy_records, toy_histories, illness_death, ("Z",))


def test_subject_without_records(toy_records, toy_histories, illness_death):
    records = [r for r in toy_records if r.id != "3"]
    with pytest.raises(ValidationError, match="no longitudinal records"):
        validate_dataset(records, toy_histories, illness_death)


def test_duplicate_subject(toy_records, toy_histories, illness_death):
    with pytest.raises(ValidationError, match="duplicate subject"):
        validate_dataset(toy_records, toy_histories + [toy_histories[0]], illness_death)
