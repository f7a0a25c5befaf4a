# Доменные типы: топология переходов, истории субъектов, продольные измерения
import math
from dataclasses import dataclass, field
from functools import cached_property

from jmstate import log_action
from jmstate.errors import ValidationError


def transition_label(pair):
    """Подпись перехода вида '0->1'"""
    return f"{pair[0]}->{pair[1]}"


@dataclass(frozen=True)
class TransitionTopology:
    """Пространство состояний и допустимые переходы h->k"""
    n_states: int
    allowed: tuple

    def __post_init__(self):
        pairs = tuple((int(h), int(k)) for h, k in self.allowed)
        object.__setattr__(self, 'allowed', pairs)
        if self.n_states < 1:
            raise ValidationError("topology needs at least one state")
        if len(set(pairs)) != len(pairs):
            raise ValidationError("duplicate transition in topology", {'allowed': pairs})
        for h, k in pairs:
            if not (0 <= h < self.n_states and 0 <= k < self.n_states) or h == k:
                raise ValidationError(f"invalid transition {h}->{k}",
                                      {'n_states': self.n_states})

    @classmethod
    def from_tmat(cls, tmat):
        """Топология из матрицы переходов (номер перехода или None/NaN)"""
        numbered = []
        for h, row in enumerate(tmat):
            for k, value in enumerate(row):
                if value is None or (isinstance(value, float) and math.isnan(value)):
                    continue
                numbered.append((int(value), (h, k)))
        numbered.sort()
        if [n for n, _ in numbered] != list(range(1, len(numbered) + 1)):
            raise ValidationError("transition numbers must be 1..K")
        return cls(len(tmat), tuple(pair for _, pair in numbered))

    @classmethod
    def illness_death(cls):
        """Три состояния: 0->1, 0->2, 1->2"""
        return cls(3, ((0, 1), (0, 2), (1, 2)))

    @property
    def n_transitions(self):
        return len(self.allowed)

    @cached_property
    def transition_index(self):
        return {pair: i + 1 for i, pair in enumerate(self.allowed)}

    @cached_property
    def absorbing(self):
        sources = {h for h, _ in self.allowed}
        return frozenset(s for s in range(self.n_states) if s not in sources)

    def is_allowed(self, h, k):
        return (h, k) in self.transition_index

    def index(self, h, k):
        """Номер перехода 1..K"""
        try:
            return self.transition_index[(h, k)]
        except KeyError:
            raise ValidationError("transition not allowed", {'from': h, 'to': k}) from None

    def pair(self, index):
        return self.allowed[index - 1]

    def outgoing(self, h):
        return tuple(pair for pair in self.allowed if pair[0] == h)

    def reachable(self, h):
        """Состояния, достижимые из h (включая h)"""
        seen = {h}
        stack = [h]
        while stack:
            current = stack.pop()
            for _, k in self.outgoing(current):
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
        return frozenset(seen)

    def tmat(self):
        matrix = [[None] * self.n_states for _ in range(self.n_states)]
        for pair, index in self.transition_index.items():
            matrix[pair[0]][pair[1]] = index
        return matrix


@dataclass(frozen=True)
class SubjectHistory:
    """История переходов одного субъекта"""
    id: str
    t_entry: float
    initial_state: int
    times: tuple
    states: tuple
    delta: tuple
    censor_time: float = None

    @classmethod
    def from_events(cls, subject_id, times, states):
        """Построение из строк (время, состояние); первая строка - вход"""
        times = [float(t) for t in times]
        states = [int(s) for s in states]
        if len(times) != len(states):
            raise ValidationError("times and states differ in length", {'id': subject_id})
        if len(times) < 2:
            raise ValidationError("history needs an entry row and at least one follow-up row",
                                  {'id': subject_id})
        previous = states[0]
        delta = []
        for state in states[1:]:
            delta.append(int(state != previous))
            previous = state
        censor_time = times[-1] if delta[-1] == 0 else None
        return cls(str(subject_id), times[0], states[0], tuple(times[1:]), tuple(states[1:]),
                   tuple(delta), censor_time)

    @property
    def n_times(self):
        return len(self.times)

    @property
    def final_state(self):
        return self.states[-1]

    @property
    def last_time(self):
        return self.times[-1]

    def state_sequence(self):
        return (self.initial_state,) + tuple(self.states)

    def recompute_delta(self):
        sequence = self.state_sequence()
        return tuple(int(sequence[r + 1] != sequence[r]) for r in range(len(self.states)))

    def sojourns(self):
        """Пребывания: (из состояния, начало, конец, куда перешёл или None)"""
        result = []
        start = self.t_entry
        current = self.initial_state
        for t, state, d in zip(self.times, self.states, self.delta):
            result.append((current, start, t, state if d else None))
            start = t
            current = state
        return result

    def event_rows(self):
        rows = [(self.t_entry, self.initial_state)]
        rows.extend(zip(self.times, self.states))
        return rows


@dataclass(frozen=True)
class LongitudinalRecord:
    """Одно измерение маркера"""
    id: str
    t: float
    y: float
    covariates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class JointDataset:
    """Проверенный набор данных: продольная часть и истории переходов"""
    topology: TransitionTopology
    histories: tuple
    longitudinal: tuple
    covariate_names: tuple = ()

    @cached_property
    def subject_ids(self):
        return tuple(h.id for h in self.histories)

    @property
    def n_subjects(self):
        return len(self.histories)

    @cached_property
    def _history_index(self):
        return {h.id: h for h in self.histories}

    @cached_property
    def _records_index(self):
        grouped = {h.id: [] for h in self.histories}
        for record in self.longitudinal:
            grouped[record.id].append(record)
        return {key: tuple(value) for key, value in grouped.items()}

    def history_for(self, subject_id):
        return self._history_index[subject_id]

    def records_for(self, subject_id):
        return self._records_index[subject_id]

    def baseline_covariates(self, subject_id):
        """Ковариаты на момент первого измерения"""
        records = self.records_for(subject_id)
        return dict(records[0].covariates) if records else {}

    def subset(self, subject_ids):
        """Поднабор субъектов в заданном порядке"""
        wanted = list(subject_ids)
        histories = tuple(self._history_index[s] for s in wanted)
        records = tuple(r for s in wanted for r in self._records_index[s])
        return JointDataset(self.topology, histories, records, self.covariate_names)


def _check_history(history, topology):
    """Проверка инвариантов истории"""
    context = {'id': history.id}
    times = (history.t_entry,) + tuple(history.times)
    for earlier, later in zip(times, times[1:]):
        if not later > earlier:
            raise ValidationError("non-increasing times", dict(context, time=later))

    sequence = history.state_sequence()
    for state in sequence:
        if not 0 <= state < topology.n_states:
            raise ValidationError("unknown state", dict(context, state=state))

    if tuple(history.delta) != history.recompute_delta():
        raise ValidationError("transition indicators do not match states", context)

    last = len(history.states) - 1
    for r, d in enumerate(history.delta):
        if d:
            h, k = sequence[r], sequence[r + 1]
            if not topology.is_allowed(h, k):
                raise ValidationError("transition not allowed",
                                      dict(context, transition=f"{h}->{k}", time=history.times[r]))
        elif r != last:
            raise ValidationError("repeated state before the last time",
                                  dict(context, time=history.times[r]))
        if r < last and sequence[r + 1] in topology.absorbing:
            raise ValidationError("rows after absorption", dict(context, time=history.times[r]))

    if sequence[0] in topology.absorbing:
        raise ValidationError("entry in an absorbing state", context)

    if history.final_state in topology.absorbing:
        if history.censor_time is not None:
            raise ValidationError("censoring row in an absorbing state", context)
    else:
        if history.delta[-1] != 0:
            raise ValidationError("missing censoring row after the last transition", context)
        if history.censor_time != history.last_time:
            raise ValidationError("censoring time differs from the last time", context)


def validate_dataset(longitudinal, histories, topology, required_covariates=()):
    """Проверка и сборка JointDataset"""
    histories = tuple(histories)
    seen = set()
    for history in histories:
        if history.id in seen:
            raise ValidationError("duplicate subject", {'id': history.id})
        seen.add(history.id)
        _check_history(history, topology)

    by_subject = {h.id: [] for h in histories}
    covariate_names = None
    for record in longitudinal:
        if record.id not in by_subject:
            raise ValidationError("longitudinal record for unknown subject", {'id': record.id})
        if not (math.isfinite(record.t) and math.isfinite(record.y)):
            raise ValidationError("non-finite longitudinal value", {'id': record.id, 'time': record.t})
        names = tuple(sorted(record.covariates))
        if covariate_names is None:
            covariate_names = names
        elif names != covariate_names:
            raise ValidationError("covariate columns differ between records", {'id': record.id})
        by_subject[record.id].append(record)

    covariate_names = covariate_names or ()
    for name in required_covariates:
        if name not in covariate_names:
            raise ValidationError("unknown covariate column", {'covariate': name})

    ordered = []
    for history in histories:
        records = by_subject[history.id]
        if not records:
            raise ValidationError("subject has no longitudinal records", {'id': history.id})
        for earlier, later in zip(records, records[1:]):
            if later.t < earlier.t:
                raise ValidationError("longitudinal times not sorted",
                                      {'id': history.id, 'time': later.t})
        if records[-1].t > history.last_time:
            raise ValidationError("longitudinal time after last event time",
                                  {'id': history.id, 'time': records[-1].t,
                                   'last_time': history.last_time})
        if records[0].t < history.t_entry:
            raise ValidationError("longitudinal time before entry time",
                                  {'id': history.id, 'time': records[0].t})
        ordered.extend(records)

    log_action("DATASET_VALIDATED", f"subjects={len(histories)} records={len(ordered)}")
    return JointDataset(topology, histories, tuple(ordered), covariate_names)
