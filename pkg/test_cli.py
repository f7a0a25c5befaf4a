"""Тесты командной строки: simulate -> prepare -> predict -> gof"""
import json

import pandas as pd
import pytest

from jmstate.cli import main
from jmstate.estimate import save_fit

REFERENCE_MODEL = {
    'fixed': ["1", "X", "time", "time:X"],
    'random': ["1", "time"],
    'shared_covariates': [{'covariate': "X", 'transitions': [t]} for t in ("0->1", "0->2", "1->2")],
    'dependence': "both",
}


def _write(path, document):
    path.write_text(json.dumps(document))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Сгенерированные данные и конфигурация модели"""
    root = tmp_path_factory.mktemp("cli")
    sim_config = _write(root / "sim.json", {'simulation': {'reference': True, 'n_subjects': 30}, 'seed': 4})
    assert main(["simulate", "--config", sim_config, "--out", str(root / "data")]) == 0
    model_config = _write(root / "model.json", {
        'model': dict(REFERENCE_MODEL, quadrature={'gh_order': 3}),
        'control': {'em_max': 2, 'qn_max': 10, 'hessian': False},
    })
    return root, model_config


def _data_args(root, out):
    return ["--longitudinal", str(root / "data" / "longitudinal.csv"),
            "--history", str(root / "data" / "history.csv"), "--out", str(out)]


def test_simulate_outputs(workdir):
    root, _ = workdir
    truth = json.loads((root / "data" / "truth.json").read_text())
    assert truth['n_subjects'] == 30 and truth['seed'] == 4
    assert truth['max_inversion_residual'] < 1e-8
    history = pd.read_csv(root / "data" / "history.csv")
    assert list(history.columns) == ["id", "time", "state"]
    assert history['id'].nunique() == 30
    assert sum(sum(row) for row in truth['upsilon']) >= 30


def test_prepare(workdir, capsys):
    root, model_config = workdir
    out = root / "prepared"
    assert main(["prepare", "--config", model_config] + _data_args(root, out)) == 0
    report = json.loads((out / "validation.json").read_text())
    assert report['subjects'] == 30
    rows = pd.read_csv(out / "transitions.csv")
    assert list(rows.columns) == ["id", "from", "to", "trans", "Tstart", "Tstop", "status", "X"]
    assert len(rows) == report['rows']
    assert "✅" in capsys.readouterr().out


@pytest.fixture(scope="module")
def fit_path(workdir, truth_fit):
    root, _ = workdir
    path = root / "truth_fit.json"
    save_fit(truth_fit, path)
    return str(path)


def test_predict(workdir, fit_path):
    root, _ = workdir
    out = root / "predict"
    args = ["predict", "--fit", fit_path, "--t", "5", "2", "--grid-size", "100", "--individual"]
    assert main(args + _data_args(root, out)) == 0
    average = pd.read_csv(out / "transprob.csv")
    assert list(average.columns) == ['s', 't', 'from', 'to', 'estimate']
    assert average['t'].tolist() == [2.0] * 5 + [5.0] * 5
    sums = average.groupby(['t', 'from'])['estimate'].sum()
    assert ((sums - 1.0).abs() < 1e-8).all()
    individual = pd.read_csv(out / "transprob_individual.csv")
    assert len(individual) == 30 * 10
    assert individual.columns[0] == 'id'


def test_predict_rejects_t_before_s(workdir, fit_path, capsys):
    root, _ = workdir
    out = root / "bad_predict"
    out.mkdir()
    args = ["predict", "--fit", fit_path, "--s", "3", "--t", "2"]
    assert main(args + _data_args(root, out)) == 2
    assert "❌" in capsys.readouterr().err
    error = json.loads((out / "error.json").read_text())
    assert error['exit_code'] == 2 and error['error'] is True


def test_gof_with_empty_grid(workdir, fit_path, capsys):
    root, _ = workdir
    out = root / "gof"
    assert main(["gof", "--fit", fit_path, "--grid", "--bins", "4"] + _data_args(root, out)) == 0
    assert pd.read_csv(out / "gof.csv").empty
    assert len(pd.read_csv(out / "bins.csv")) == 4
    residuals = pd.read_csv(out / "residuals.csv")
    assert list(residuals.columns) == ['id', 'time', 'y', 'fitted', 'residual', 'standardized']
    assert "нет точек сетки" in capsys.readouterr().out


def test_malformed_csv(workdir, tmp_path):
    _, model_config = workdir
    longitudinal = tmp_path / "longitudinal.csv"
    longitudinal.write_text("id,time,y,X\n1,0,1.0,0.5\n1,abc,2.0,0.5\n")
    history = tmp_path / "history.csv"
    history.write_text("id,time,state\n1,0,0\n1,4,0\n")
    out = tmp_path / "out"
    out.mkdir()
    code = main(["prepare", "--config", model_config, "--longitudinal", str(longitudinal),
                 "--history", str(history), "--out", str(out)])
    assert code == 2
    error = json.loads((out / "error.json").read_text())
    assert "non-numeric time on line 3" in error['message']


def test_simulate_without_section(workdir, tmp_path):
    _, model_config = workdir
    assert main(["simulate", "--config", model_config, "--out", str(tmp_path / "sim")]) == 2


@pytest.mark.slow
def test_fit_is_deterministic(workdir):
    root, model_config = workdir
    documents = []
    for name in ("fit_a", "fit_b"):
        out = root / name
        assert main(["fit", "--config", model_config, "--seed", "1"] + _data_args(root, out)) == 0
        documents.append(json.loads((out / "fit.json").read_text()))
        assert (out / "residuals.csv").exists()
    first, second = documents
    assert [p['estimate'] for p in first['parameters']] == [p['estimate'] for p in second['parameters']]
    assert first['config']['seed'] == 1
