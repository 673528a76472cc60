import json
import subprocess
import sys

import pytest

from egmf import cli
from egmf import harness as H
from egmf.errors import NumericalAbort


@pytest.fixture
def small_config(tmp_path):
    cfg = H.default_config("single_bayes").to_dict()
    cfg.update(M=100, seeds=[0, 1])
    path = tmp_path / "sb.json"
    path.write_text(json.dumps(cfg))
    return path


def test_experiment_run_writes_outputs(small_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["single_bayes", "--config", str(small_config), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [r["seed"] for r in summary["runs"]] == [0, 1]
    assert "single_bayes seed=0" in capsys.readouterr().out


def test_seed_and_filter_selection(small_config, tmp_path):
    out = tmp_path / "out"
    code = cli.main(["single_bayes", "--config", str(small_config), "--seed", "5", "--filters", "rhf",
                     "--out", str(out)])
    assert code == 0
    run = json.loads((out / "summary.json").read_text())["runs"][0]
    assert run["seed"] == 5 and [f["kind"] for f in run["config"]["filters"]] == ["rhf"]


def test_unknown_filter_is_config_error(small_config, tmp_path, capsys):
    code = cli.main(["single_bayes", "--config", str(small_config), "--filters", "kalman",
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_config_for_other_experiment_rejected(small_config, tmp_path):
    assert cli.main(["lorenz63", "--config", str(small_config), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_malformed_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "single_bayes", "M": 10, "seeds": [0], "filters": [], "extra": 1}')
    assert cli.main(["single_bayes", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_numerical_abort_exit_code(small_config, tmp_path, monkeypatch, capsys):
    def boom(cfg, seed):
        raise NumericalAbort("ensemble diverged", member=3)

    monkeypatch.setattr(H, "run_experiment", boom)
    code = cli.main(["single_bayes", "--config", str(small_config), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_NUMERICAL
    assert "numerical abort" in capsys.readouterr().err


def test_io_error_exit_code(small_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = cli.main(["single_bayes", "--config", str(small_config), "--out", str(blocker / "sub")])
    assert code == 1


def test_thread_override(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli.n_workers() == 3
    monkeypatch.setenv(cli.THREADS_ENV, "0")
    assert cli.n_workers() == 1
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    with pytest.raises(SystemExit):
        cli.n_workers()


def test_parser_subcommands():
    p = cli.build_parser()
    a = p.parse_args(["table1", "--seeds", "0,1,2"])
    assert a.seeds == [0, 1, 2] and a.func is cli.cmd_table1
    a = p.parse_args(["lorenz-sweep", "--c-grid", "0.5,0.6", "--inflation-grid", "1.0"])
    assert a.c_grid == [0.5, 0.6] and a.inflation_grid == [1.0]
    with pytest.raises(SystemExit):
        p.parse_args(["lorenz96"])


def test_console_entry_point(small_config, tmp_path):
    out = tmp_path / "o"
    proc = subprocess.run([sys.executable, "-m", "egmf.cli", "single_bayes", "--config", str(small_config),
                           "--seed", "0", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "rms_table.csv").exists()
