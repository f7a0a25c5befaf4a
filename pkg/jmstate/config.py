# Конфигурация запуска: значения по умолчанию, разбор JSON, сериализация спецификации
import copy
import json
import os
from dataclasses import asdict, dataclass, field, replace

from jmstate import __version__, log_action
from jmstate.design import DerivDesign, derive_deriv_design, time_basis
from jmstate.errors import ConfigError
from jmstate.estimate import FitControl
from jmstate.models import TransitionTopology, transition_label
from jmstate.params import (BaselineGroup, ModelSpec, QuadratureSpec, SharedCovariate, SplineSpec,
                            unpack)
from jmstate.simulate import CovariateLaw, SimulationDesign, reference_design, reference_spec

# Значения по умолчанию по разделам
DEFAULTS = {
    # Квадратуры
    'quadrature': {
        'gh_order': 9,            # узлов Гаусса-Эрмита на измерение
        'gk_order': 15,           # правило для интеграла по времени
        'gk_panels': 1
    },

    # Базовые интенсивности
    'spline': {
        'degree': 3,
        'internal_knots': 3
    },

    # Оптимизация
    'control': {
        'em_max': 30,
        'em_tol': 1e-6,
        'qn_max': 200,
        'qn_tol': 1e-5,
        'lmm_maxiter': 500,
        'hessian': True
    },

    # Генерация данных
    'simulation': {
        'n_subjects': 500,
        'censoring': (1.0, 25.0),
        'schedule_step': 1.0 / 3.0,
        'schedule_count': 50,
        'initial_state': 0,
        't_entry': 0.0
    },

    # Вероятности переходов
    'predict': {
        's': 0.0,
        'grid_size': 1000,
        'b_source': "eb"
    },

    # Диагностика
    'diagnostics': {
        'n_bins': 10,
        'grid_points': 25
    },

    'run': {
        'seed': 0
    }
}


def get_setting(section, name):
    """Значение по умолчанию для раздела и имени"""
    try:
        return DEFAULTS[section][name]
    except KeyError:
        raise ConfigError("unknown setting", {'section': section, 'name': name}) from None


@dataclass
class RunConfig:
    """Разобранная конфигурация запуска"""
    spec: ModelSpec
    control: FitControl
    simulation: SimulationDesign = None
    seed: int = 0
    predict: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    echo: dict = field(default_factory=dict)


def parse_transition(value):
    """'0->1' или [0, 1] -> (0, 1)"""
    if isinstance(value, str):
        parts = value.split("->")
        if len(parts) != 2:
            raise ConfigError(f"cannot parse transition '{value}'")
        try:
            return int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"cannot parse transition '{value}'") from None
    try:
        h, k = value
        return int(h), int(k)
    except (TypeError, ValueError):
        raise ConfigError("cannot parse transition", {'value': repr(value)}) from None


def topology_from_config(section):
    if section == "illness_death":
        return TransitionTopology.illness_death()
    if not isinstance(section, dict):
        raise ConfigError("topology must be 'illness_death' or an object")
    if 'tmat' in section:
        return TransitionTopology.from_tmat(section['tmat'])
    if 'transitions' not in section or 'n_states' not in section:
        raise ConfigError("topology needs tmat or n_states with transitions")
    return TransitionTopology(int(section['n_states']),
                              tuple(parse_transition(t) for t in section['transitions']))


def _dependence(value, topology):
    if value is None:
        return {}
    if isinstance(value, str):
        return {pair: value for pair in topology.allowed}
    if not isinstance(value, dict):
        raise ConfigError("dependence must be a form name or an object keyed by transition")
    return {parse_transition(label): form for label, form in value.items()}


def build_spec(section, topology):
    """ModelSpec из раздела model"""
    if 'fixed' not in section or 'random' not in section:
        raise ConfigError("model needs fixed and random designs")
    bases = tuple(time_basis(b['name'], b.get('kind', "identity"), **{k: b[k] for k in ('alpha', 'nu') if k in b})
                  for b in section.get('time_bases', [{'name': "time"}]))
    fixed = tuple(section['fixed'])
    random = tuple(section['random'])

    deriv = section.get('deriv', "auto")
    if deriv == "auto":
        deriv = derive_deriv_design(fixed, random, bases)
    elif isinstance(deriv, dict):
        deriv = DerivDesign(tuple(deriv.get('fixed', ())), tuple(deriv.get('ind_fixed', ())),
                            tuple(deriv.get('random', ())), tuple(deriv.get('ind_random', ())))
    elif deriv is not None:
        raise ConfigError("deriv must be 'auto', null or an object")

    shared = tuple(SharedCovariate(item['covariate'], tuple(parse_transition(t) for t in item['transitions']))
                   for item in section.get('shared_covariates', []))
    groups = tuple(BaselineGroup(tuple(parse_transition(t) for t in item['transitions']), item.get('knots'))
                   for item in section.get('baseline_groups', []))

    spline = {**DEFAULTS['spline'], **section.get('spline', {})}
    quadrature = {**DEFAULTS['quadrature'], **section.get('quadrature', {})}
    try:
        return ModelSpec(
            topology=topology,
            fixed_design=fixed,
            random_design=random,
            time_basis=bases,
            deriv_design=deriv,
            per_transition_covariates=shared,
            dependence_form=_dependence(section.get('dependence'), topology),
            baseline_groups=groups,
            spline=SplineSpec(int(spline['degree']), int(spline['internal_knots'])),
            quadrature=QuadratureSpec(int(quadrature['gh_order']), int(quadrature['gk_order']),
                                      int(quadrature['gk_panels'])),
            clock=section.get('clock', "forward"),
        )
    except TypeError as error:
        raise ConfigError(f"malformed model section: {error}") from None


def spec_to_dict(spec):
    """Полное описание модели для документа подгонки"""
    deriv = spec.deriv_design
    return {
        'topology': {'n_states': spec.topology.n_states,
                     'transitions': [list(pair) for pair in spec.topology.allowed]},
        'fixed': list(spec.fixed_design),
        'random': list(spec.random_design),
        'time_bases': [{'name': b.name, 'kind': b.kind, 'alpha': b.alpha, 'nu': b.nu} for b in spec.time_basis],
        'deriv': None if deriv is None else {'fixed': list(deriv.fixed), 'ind_fixed': list(deriv.ind_fixed),
                                             'random': list(deriv.random), 'ind_random': list(deriv.ind_random)},
        'shared_covariates': [{'covariate': s.covariate, 'transitions': [list(p) for p in s.transitions]}
                              for s in spec.per_transition_covariates],
        'dependence': {transition_label(pair): form for pair, form in spec.dependence_form},
        'baseline_groups': [{'transitions': [list(p) for p in g.transitions],
                             'knots': None if g.knots is None else list(g.knots)}
                            for g in spec.baseline_groups],
        'spline': asdict(spec.spline),
        'quadrature': asdict(spec.quadrature),
        'clock': spec.clock,
    }


def spec_from_dict(document):
    return build_spec(document, topology_from_config(document['topology']))


def build_control(section, threads=None):
    values = {**DEFAULTS['control'], **section}
    unknown = set(values) - set(FitControl.__dataclass_fields__)
    if unknown:
        raise ConfigError("unknown control settings", {'names': sorted(unknown)})
    control = FitControl(**values)
    return replace(control, threads=threads) if threads is not None else control


def _schedule(section):
    schedule = section.get('schedule')
    if schedule is None:
        step = float(section.get('schedule_step', get_setting('simulation', 'schedule_step')))
        count = int(section.get('schedule_count', get_setting('simulation', 'schedule_count')))
        return tuple(k * step for k in range(count))
    return tuple(float(t) for t in schedule)


def build_simulation(section, spec, seed):
    """SimulationDesign: эталонная схема или явные параметры по именам"""
    n_subjects = int(section.get('n_subjects', get_setting('simulation', 'n_subjects')))
    if section.get('reference'):
        return reference_design(n_subjects, seed)
    if not spec.knots_placed:
        raise ConfigError("simulation needs knots in every baseline group")

    given = section.get('parameters')
    if not isinstance(given, dict):
        raise ConfigError("simulation needs parameters by name or reference: true")
    layout = spec.layout
    vector = [0.0] * layout.size
    for name, value in given.items():
        vector[layout.index_of(name)] = float(value)
    missing = [name for name in layout.names if name not in given]
    if missing:
        raise ConfigError("simulation parameters missing", {'names': missing})

    laws = tuple(CovariateLaw(**law) for law in section.get('covariates', []))
    censoring = tuple(float(x) for x in section.get('censoring', get_setting('simulation', 'censoring')))
    return SimulationDesign(
        spec=spec,
        params=unpack(vector, spec),
        covariates=laws,
        schedule=_schedule(section),
        censoring=censoring,
        n_subjects=n_subjects,
        seed=seed,
        initial_state=int(section.get('initial_state', get_setting('simulation', 'initial_state'))),
        t_entry=float(section.get('t_entry', get_setting('simulation', 't_entry'))),
        horizon=section.get('horizon'),
    )


def resolve(document, overrides=None):
    """RunConfig из словаря конфигурации и переопределений командной строки"""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    document = copy.deepcopy(document)
    seed = int(overrides.get('seed', document.get('seed', get_setting('run', 'seed'))))
    threads = overrides.get('threads')
    if threads is None and os.getenv('JMSTATE_THREADS'):
        threads = int(os.getenv('JMSTATE_THREADS'))

    model = document.get('model')
    simulation = document.get('simulation')
    if model is None and not (simulation or {}).get('reference'):
        raise ConfigError("config needs a model section")
    if model is not None:
        spec = build_spec(model, topology_from_config(document.get('topology', "illness_death")))
    else:
        spec = reference_spec(knots=None)
    gh_order = overrides.get('gh_order')
    if gh_order is not None:
        spec = spec.with_quadrature(gh_order=int(gh_order))

    control = build_control(document.get('control', {}), threads)
    control = replace(control, gh_order=spec.quadrature.gh_order)
    design = build_simulation(simulation, spec, seed) if simulation else None

    predict = {**DEFAULTS['predict'], **document.get('predict', {})}
    if 'grid_size' in overrides:
        predict['grid_size'] = int(overrides['grid_size'])
    diagnostics = {**DEFAULTS['diagnostics'], **document.get('diagnostics', {})}

    echo = {
        'version': __version__,
        'seed': seed,
        'model': spec_to_dict(spec),
        'control': {k: v for k, v in asdict(control).items() if k != 'threads'},
        'simulation': simulation,
        'predict': predict,
        'diagnostics': diagnostics,
    }
    return RunConfig(spec=spec, control=control, simulation=design, seed=seed,
                     predict=predict, diagnostics=diagnostics, echo=echo)


def load_config(path, overrides=None):
    """Чтение JSON-файла конфигурации"""
    try:
        with open(path, encoding='utf-8') as handle:
            document = json.load(handle)
    except OSError as error:
        raise ConfigError(f"cannot read config: {error.strerror}", {'path': str(path)}) from None
    except json.JSONDecodeError as error:
        raise ConfigError(f"config is not valid JSON: {error.msg} on line {error.lineno}",
                          {'path': str(path)}) from None
    if not isinstance(document, dict):
        raise ConfigError("config must be a JSON object", {'path': str(path)})
    config = resolve(document, overrides)
    log_action("CONFIG_LOADED", f"path={path} seed={config.seed} gh_order={config.control.gh_order}")
    return config
