# Командная строка: prepare, fit, simulate, predict, gof
import argparse
import json
import os
import sys

import numpy as np
import pandas as pd

from jmstate import __version__, create_logger, log_action
from jmstate.config import get_setting, load_config
from jmstate.dataio import (read_history_csv, read_longitudinal_csv, write_history_csv,
                            write_longitudinal_csv)
from jmstate.diagnostics import (conditional_residuals, fit_workspaces, observed_vs_predicted,
                                 transprob_gof)
from jmstate.errors import EXIT_OK, ValidationError, create_error_response, handle_error
from jmstate.estimate import fit, load_fit, save_fit
from jmstate.models import validate_dataset
from jmstate.msprep import expand_transitions, rows_to_frame, upsilon_matrix
from jmstate.simulate import simulate_dataset
from jmstate.transprob import curve_frame, parametric_average_curve, parametric_curve


def _output_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _json_default(value):
    # numpy-скаляры в деталях ошибок
    return value.item() if hasattr(value, 'item') else str(value)


def _write_json(document, path):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(document, handle, indent=2, allow_nan=True, default=_json_default)
    log_action("FILE_WRITTEN", path)


def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format="%.12g")
    log_action("FILE_WRITTEN", path)


def load_dataset(longitudinal_path, history_path, spec):
    """CSV -> проверенный JointDataset для данной модели"""
    records = read_longitudinal_csv(longitudinal_path)
    histories = read_history_csv(history_path)
    return validate_dataset(records, histories, spec.topology, spec.covariate_names())


def _upsilon_document(dataset):
    matrix = upsilon_matrix(dataset)
    return [[int(v) for v in row] for row in matrix]


def cmd_prepare(args):
    config = load_config(args.config, {'seed': args.seed})
    spec = config.spec
    dataset = load_dataset(args.longitudinal, args.history, spec)
    out = _output_dir(args.out)

    rows = expand_transitions(dataset)
    _write_csv(rows_to_frame(rows, dataset.covariate_names), os.path.join(out, 'transitions.csv'))
    report = {
        'version': __version__,
        'subjects': dataset.n_subjects,
        'longitudinal_records': len(dataset.longitudinal),
        'rows': len(rows),
        'upsilon': _upsilon_document(dataset),
        'config': config.echo,
    }
    _write_json(report, os.path.join(out, 'validation.json'))

    print(f"✅ Данные подготовлены: {dataset.n_subjects} субъектов, {len(rows)} строк")
    for h, row in enumerate(report['upsilon']):
        print(f"   {h}: {row}")
    return EXIT_OK


def _diagnostic_exports(fit_result, dataset, out, n_bins, threads, grid=None, grid_size=None, s=0.0):
    _write_csv(conditional_residuals(fit_result, dataset, threads), os.path.join(out, 'residuals.csv'))
    _write_csv(observed_vs_predicted(fit_result, dataset, n_bins, threads), os.path.join(out, 'bins.csv'))
    if grid is None:
        return None
    frame, coverage = transprob_gof(fit_result, dataset, grid, s, grid_size, threads=threads)
    _write_csv(frame, os.path.join(out, 'gof.csv'))
    return coverage


def _default_grid(dataset, s, points):
    upper = max(h.last_time for h in dataset.histories)
    return np.linspace(s, upper, points + 1)[1:]


def cmd_fit(args):
    overrides = {'seed': args.seed, 'gh_order': args.gh_order, 'threads': args.threads,
                 'grid_size': args.grid_size}
    config = load_config(args.config, overrides)
    dataset = load_dataset(args.longitudinal, args.history, config.spec)
    out = _output_dir(args.out)

    print(f"🚀 Подгонка: {dataset.n_subjects} субъектов, {config.control.gh_order} узлов Гаусса-Эрмита")
    result = fit(dataset, config.spec, config.control)
    save_fit(result, os.path.join(out, 'fit.json'), config.echo)

    diagnostics = config.diagnostics
    grid = _default_grid(dataset, 0.0, int(diagnostics['grid_points'])) if args.gof else None
    coverage = _diagnostic_exports(result, dataset, out, int(diagnostics['n_bins']), config.control.threads,
                                   grid, int(config.predict['grid_size']))

    print(f"📊 log L = {result.loglik:.4f}, фаза {result.convergence['phase']}, "
          f"итераций {result.convergence['iterations']}")
    if result.flags:
        print(f"   ⚠️  Флаги: {', '.join(result.flags)}")
    if coverage:
        print("   🎯 Покрытие: " + ", ".join(f"{label} {value:.0%}" for label, value in coverage.items()))
    print(f"💾 Результаты сохранены в: {out}")
    return EXIT_OK


def cmd_simulate(args):
    config = load_config(args.config, {'seed': args.seed, 'threads': args.threads})
    if config.simulation is None:
        raise ValidationError("config has no simulation section", {'path': args.config})
    out = _output_dir(args.out)
    dataset, truth = simulate_dataset(config.simulation, config.control.threads)

    write_longitudinal_csv(dataset.longitudinal, os.path.join(out, 'longitudinal.csv'))
    write_history_csv(dataset.histories, os.path.join(out, 'history.csv'))
    truth['version'] = __version__
    truth['config'] = config.echo
    truth['upsilon'] = _upsilon_document(dataset)
    _write_json(truth, os.path.join(out, 'truth.json'))

    print(f"✅ Сгенерировано субъектов: {dataset.n_subjects} (seed {config.seed})")
    print(f"   Записей маркера: {len(dataset.longitudinal)}")
    print(f"   Невязка обращения: {truth['max_inversion_residual']:.2e}")
    return EXIT_OK


def cmd_predict(args):
    result = load_fit(args.fit)
    spec = result.spec
    times = sorted(args.t)
    if times[0] < args.s:
        raise ValidationError("s must not exceed t", {'s': args.s, 't': times[0]})
    dataset = load_dataset(args.longitudinal, args.history, spec)
    out = _output_dir(args.out)
    grid_size = args.grid_size or get_setting('predict', 'grid_size')

    workspaces = fit_workspaces(result, dataset, args.threads)
    curves = parametric_average_curve(result.params, workspaces, spec, args.s, times, grid_size,
                                      args.b_source, args.threads)
    _write_csv(curve_frame(args.s, times, curves, spec.topology), os.path.join(out, 'transprob.csv'))

    if args.individual:
        frames = []
        for ws in workspaces:
            matrices = parametric_curve(result.params, ws, spec, args.b_source, args.s, times, grid_size)
            frame = curve_frame(args.s, times, matrices, spec.topology)
            frame.insert(0, 'id', ws.id)
            frames.append(frame)
        _write_csv(pd.concat(frames, ignore_index=True), os.path.join(out, 'transprob_individual.csv'))

    print(f"✅ Вероятности переходов: s={args.s}, точек {len(times)}, b={args.b_source}")
    return EXIT_OK


def cmd_gof(args):
    result = load_fit(args.fit)
    dataset = load_dataset(args.longitudinal, args.history, result.spec)
    out = _output_dir(args.out)
    grid = np.asarray(args.grid, dtype=float) if args.grid is not None else _default_grid(
        dataset, args.s, get_setting('diagnostics', 'grid_points'))
    grid_size = args.grid_size or get_setting('predict', 'grid_size')

    coverage = _diagnostic_exports(result, dataset, out, args.bins, args.threads, grid, grid_size, args.s)
    if not coverage:
        print("📊 Покрытие: нет точек сетки")
    else:
        print("📊 Покрытие: " + ", ".join(f"{label} {value:.0%}" for label, value in coverage.items()))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='jmstate',
                                     description='Совместная модель маркера и мультисостояний')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)

    def data_arguments(sub):
        sub.add_argument('--longitudinal', required=True, help='CSV: id,time,y,ковариаты')
        sub.add_argument('--history', required=True, help='CSV: id,time,state')
        sub.add_argument('--out', required=True, help='Каталог результатов')
        sub.add_argument('--threads', type=int, help='Число потоков')

    prepare = commands.add_parser('prepare', help='Проверка данных и строки переходов')
    data_arguments(prepare)
    prepare.add_argument('--config', required=True)
    prepare.add_argument('--seed', type=int)
    prepare.set_defaults(handler=cmd_prepare)

    fit_parser = commands.add_parser('fit', help='Подгонка совместной модели')
    data_arguments(fit_parser)
    fit_parser.add_argument('--config', required=True)
    fit_parser.add_argument('--seed', type=int)
    fit_parser.add_argument('--gh-order', type=int, help='Узлов Гаусса-Эрмита на измерение')
    fit_parser.add_argument('--grid-size', type=int)
    fit_parser.add_argument('--gof', action='store_true', help='Сравнение с Аалена-Йохансена')
    fit_parser.set_defaults(handler=cmd_fit)

    simulate = commands.add_parser('simulate', help='Генерация данных')
    simulate.add_argument('--config', required=True)
    simulate.add_argument('--out', required=True)
    simulate.add_argument('--seed', type=int)
    simulate.add_argument('--threads', type=int)
    simulate.set_defaults(handler=cmd_simulate)

    predict = commands.add_parser('predict', help='Параметрические вероятности переходов')
    data_arguments(predict)
    predict.add_argument('--fit', required=True, help='JSON подгонки')
    predict.add_argument('--s', type=float, default=get_setting('predict', 's'))
    predict.add_argument('--t', type=float, nargs='+', required=True)
    predict.add_argument('--grid-size', type=int)
    predict.add_argument('--b-source', choices=('eb', 'zero'), default=get_setting('predict', 'b_source'))
    predict.add_argument('--individual', action='store_true', help='Также по каждому субъекту')
    predict.set_defaults(handler=cmd_predict)

    gof = commands.add_parser('gof', help='Диагностика подгонки')
    data_arguments(gof)
    gof.add_argument('--fit', required=True)
    gof.add_argument('--s', type=float, default=get_setting('predict', 's'))
    gof.add_argument('--grid', type=float, nargs='*')
    gof.add_argument('--grid-size', type=int)
    gof.add_argument('--bins', type=int, default=get_setting('diagnostics', 'n_bins'))
    gof.set_defaults(handler=cmd_gof)
    return parser


def main(argv=None):
    """Точка входа; возвращает код выхода 0/2/3"""
    parser = build_parser()
    args = parser.parse_args(argv)
    create_logger(testing=bool(os.getenv('JMSTATE_TESTING')))
    try:
        return args.handler(args)
    except Exception as error:
        code = handle_error(error)
        message = getattr(error, 'message', str(error))
        print(f"❌ {message}", file=sys.stderr)
        out = getattr(args, 'out', None)
        if out and os.path.isdir(out):
            _write_json(create_error_response(code, message, getattr(error, 'details', None)),
                        os.path.join(out, 'error.json'))
        return code


if __name__ == '__main__':
    sys.exit(main())
