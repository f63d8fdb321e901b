"""
Test the experiment runner: exit codes, CSV artifacts and determinism
"""

import csv
from pathlib import Path
from typing import List

import pytest
from pytest_mock import MockerFixture

from src import cli
from src.cli import build_parser, run
from src.tails.gw_tails import TailEstimate, TailMethod, TailPoint
from src.tails.stats_core import wilson_interval

GEOMETRIC = ["--dist", "geometric: 0.5"]


def _read(path: Path) -> List[str]:
    return path.read_text(encoding="utf-8").splitlines()


def _out(path: Path) -> List[str]:
    return ["--out", str(path)]


def test_params_schroeder(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Test the parameters of p1 = p2 = 1/2"""
    out = tmp_path / "params.csv"
    code = run(["params", "--dist", "pmf: 1:0.5, 2:0.5", *_out(out)])

    assert code == 0
    stdout = capsys.readouterr().out
    assert "regime=Schroeder" in stdout
    assert "tau=1.70951" in stdout
    rows = list(csv.reader(_read(out)[:-1]))
    assert rows[0] == ["parameter", "value"]
    assert ["regime", "Schroeder"] in rows


def test_params_prunes_extinction(
    tmp_path: Path, capsys: pytest.CaptureFixture
) -> None:
    code = run(["params", "--dist", "pmf: 0:0.25, 2:0.75", *_out(tmp_path / "p.csv")])

    assert code == 0
    assert "using the pruned law" in capsys.readouterr().out


def test_csv_footer(tmp_path: Path) -> None:
    out = tmp_path / "params.csv"
    run(["params", *GEOMETRIC, "--seed", "4", *_out(out)])

    footer = _read(out)[-1]
    assert footer.startswith("# config_hash=")
    assert footer.endswith(" seed=4")


def test_deterministic_limit_exit_code(
    tmp_path: Path, capsys: pytest.CaptureFixture
) -> None:
    code = run(["params", "--dist", "pmf: 2:1.0", *_out(tmp_path / "p.csv")])

    assert code == 3
    assert "deterministic" in capsys.readouterr().err


def test_invalid_flag_value() -> None:
    assert run(["params", *GEOMETRIC, "--seed", "-1"]) == 2


def test_unknown_command() -> None:
    assert run(["frobnicate"]) == 2


def test_missing_distribution(tmp_path: Path) -> None:
    assert run(["params", *_out(tmp_path / "p.csv")]) == 2


def test_config_file_errors(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config = tmp_path / "run.cfg"
    config.write_text("sedd = 42\n", encoding="utf-8")

    argv = ["params", *GEOMETRIC, "--config", str(config)]
    code = run(argv + _out(tmp_path / "p.csv"))

    assert code == 2
    assert "line 1: unknown key 'sedd'" in capsys.readouterr().err


def test_flags_override_config_and_environment(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setenv("SMALLVALUE_SEED", "5")
    config = tmp_path / "run.cfg"
    config.write_text("seed = 9\n", encoding="utf-8")
    env_out = tmp_path / "env.csv"
    file_out = tmp_path / "file.csv"
    flag_out = tmp_path / "flag.csv"

    run(["params", *GEOMETRIC, *_out(env_out)])
    run(["params", *GEOMETRIC, "--config", str(config), *_out(file_out)])
    run(["params", *GEOMETRIC, "--config", str(config), "--seed", "3", *_out(flag_out)])

    assert _read(env_out)[-1].endswith("seed=5")
    assert _read(file_out)[-1].endswith("seed=9")
    assert _read(flag_out)[-1].endswith("seed=3")


def test_resource_limit_exit_code(tmp_path: Path) -> None:
    argv = [
        "ilt-tail",
        "--stop-rule",
        "fixed_time",
        "--horizon",
        "1e9",
        "--level",
        "10",
        "--budget",
        "8",
    ]
    assert run(argv + _out(tmp_path / "ilt.csv")) == 4


def test_internal_error_exit_code(tmp_path: Path, mocker: MockerFixture) -> None:
    mocker.patch("src.cli.derive_params", side_effect=RuntimeError("boom"))
    assert run(["params", *GEOMETRIC, *_out(tmp_path / "p.csv")]) == 1


def test_prune_command(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    out = tmp_path / "prune.csv"
    assert run(["prune", "--dist", "pmf: 0:0.25, 2:0.75", *_out(out)]) == 0

    assert "result: PASS" in capsys.readouterr().out
    rows = list(csv.reader(_read(out)[1:-1]))
    assert [row[0] for row in rows] == ["1", "2"]


def test_bm_green_command(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    out = tmp_path / "green.csv"
    argv = ["bm-green", "--level", "3", "--budget", "500", "--tolerance", "0.5"]
    code = run(argv + _out(out))

    assert code == 0
    lines = _read(out)
    assert lines[0] == "site,x,L_hat,green"
    assert len(lines) == 1 + 17 + 1
    assert "result: PASS" in capsys.readouterr().out


def test_gw_tail_identical_across_threads(tmp_path: Path) -> None:
    """Test the CSV does not depend on the number of worker processes"""
    argv = [
        "gw-tail",
        *GEOMETRIC,
        "--method",
        "mc",
        "--epsilons",
        "0.5,0.25,0.125",
        "--depth",
        "12",
        "--budget",
        "4096",
        "--seed",
        "2",
    ]
    one, two = tmp_path / "one.csv", tmp_path / "two.csv"

    assert run(argv + ["--threads", "1", *_out(one)]) == 0
    assert run(argv + ["--threads", "2", *_out(two)]) == 0
    assert one.read_bytes() == two.read_bytes()


def test_gw_tail_unknown_method(tmp_path: Path) -> None:
    argv = ["gw-tail", *GEOMETRIC, "--method", "magic", *_out(tmp_path / "t.csv")]
    assert run(argv) == 2


def test_scaling_check_identity(tmp_path: Path) -> None:
    out = tmp_path / "scaling.csv"
    argv = ["scaling-check", "--eta", "1", "--level", "3", "--budget", "100"]
    assert run(argv + _out(out)) == 0

    row = next(csv.reader(_read(out)[1:2]))
    assert row[:2] == ["1", "0.0"]


def test_disjoint_command(tmp_path: Path) -> None:
    out = tmp_path / "disjoint.csv"
    argv = ["disjoint", "--level", "5", "--eps-site", "4", "--budget", "500"]
    assert run(argv + _out(out)) == 0
    assert _read(out)[0].startswith("m,ell,epsilon,p_hat")


def test_exit_tails_without_fit(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Test a probe too short to fit still writes its points"""
    out = tmp_path / "exit.csv"
    argv = [
        "exit-tails",
        "--side",
        "max",
        "--level",
        "2",
        "--budget",
        "20",
        "--a-values",
        "0.01,0.02,0.03",
    ]

    assert run(argv + _out(out)) == 0
    assert len(_read(out)) == 1 + 3 + 1
    assert "exit_tail_beta: not available" in capsys.readouterr().out


def test_parser_lists_every_command() -> None:
    help_text = build_parser().format_help()
    for name in ("params", "gw-tail", "ilt-tail", "silt-tail", "exit-tails"):
        assert name in help_text


def test_grid_flags_reach_density_solver(tmp_path: Path, mocker: MockerFixture) -> None:
    solver = mocker.spy(cli, "density_fixed_point")
    argv = [
        "gw-density",
        *GEOMETRIC,
        "--grid-geometric",
        "64",
        "--grid-linear",
        "100",
        "--iterations",
        "3",
    ]
    assert run(argv + _out(tmp_path / "density.csv")) == 0

    spec = solver.call_args.args[1]
    assert (spec.n_geometric, spec.n_linear) == (64, 100)
    assert len(_read(tmp_path / "density.csv")) == 1 + 64 + 101 + 1 + 1


def test_silt_tail_raises_level_and_brackets_strategy(
    tmp_path: Path, mocker: MockerFixture, capsys: pytest.CaptureFixture
) -> None:
    """Test explicit eps values go through the level search and both bounds print"""
    points = [
        TailPoint.from_estimate(eps, wilson_interval(k, 1000), TailMethod.MC)
        for eps, k in ((0.05, 40), (0.01, 5))
    ]
    measured = TailEstimate(
        points=points, fit=None, target_exponent=-0.5, fit_kind="stretched"
    )
    levels = mocker.patch("src.cli.clearing_level", return_value=5)
    tails = mocker.patch("src.cli.estimate_tail", return_value=measured)
    argv = [
        "silt-tail",
        "--q",
        "2",
        "--level",
        "3",
        "--epsilons",
        "0.05,0.01",
        "--fine-offset",
        "3",
        "--n",
        "3",
        "--budget",
        "400",
    ]
    out = tmp_path / "silt.csv"
    assert run(argv + _out(out)) == 0

    args = levels.call_args.args
    assert list(args[1]) == [0.05, 0.01]
    assert (args[2], args[3], args[4]) == (3, 6, 100)
    assert tails.call_args.args[1] == 5
    stdout = capsys.readouterr().out
    assert "level raised to 5" in stdout
    chebyshev = [line for line in stdout.splitlines() if line.startswith("Chebyshev")]
    assert len(chebyshev) == 1 and chebyshev[0].endswith("-> PASS")
    assert any(row.endswith(",bound_upper") for row in _read(out))
