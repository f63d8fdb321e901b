"""
Test experiment configuration parsing, environment defaults and hashing
"""

from pathlib import Path

import pytest

from src.config.settings import (
    ExperimentConfig,
    config_from_env,
    config_hash,
    load_config,
    parse_config,
)
from src.tails.exceptions import ConfigError


def test_empty_config_gives_defaults() -> None:
    config = parse_config("")
    assert config == ExperimentConfig()
    assert config.seed == 0
    assert config.threads == 1


def test_parse_typed_values() -> None:
    """Test comments, inline comments and dashed keys"""
    config = parse_config(
        "# tail run\n"
        "seed = 42\n"
        "epsilons = 0.5, 0.25\n"
        "q = 1,2\n"
        "stop-rule = exit\n"
        "level = 9  # finer\n"
        "grid-geometric = 4096\n"
    )
    assert config.seed == 42
    assert config.epsilons == (0.5, 0.25)
    assert config.q == (1.0, 2.0)
    assert config.stop_rule == "exit"
    assert config.level == 9
    assert config.grid_geometric == 4096
    assert config.grid_linear is None


def test_unknown_key_reports_line() -> None:
    """Test a misspelt key names its line"""
    with pytest.raises(ConfigError) as exc_info:
        parse_config("sedd = 42")

    assert exc_info.value.problems == ["line 1: unknown key 'sedd'"]
    assert exc_info.value.exit_code == 2


def test_every_problem_is_reported() -> None:
    with pytest.raises(ConfigError) as exc_info:
        parse_config("seed = x\n# comment\n\nbogus = 1\nthreads = 0\n")

    problems = exc_info.value.problems
    assert len(problems) == 3
    assert problems[0].startswith("line 1: bad value")
    assert problems[1] == "line 4: unknown key 'bogus'"
    assert problems[2].startswith("line 5: bad value")


def test_missing_value() -> None:
    with pytest.raises(ConfigError) as exc_info:
        parse_config("budget =\n")
    assert "missing value" in exc_info.value.problems[0]


def test_base_config_is_overridden() -> None:
    base = ExperimentConfig(seed=3, budget=500)
    config = parse_config("seed = 4", base)
    assert (config.seed, config.budget) == (4, 500)


def test_merged_skips_none() -> None:
    config = ExperimentConfig(seed=3).merged({"seed": None, "level": 5})
    assert (config.seed, config.level) == (3, 5)


def test_load_config(tmp_path: Path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("threads = 4\nbudget = 2000\n", encoding="utf-8")

    config = load_config(str(path))
    assert (config.threads, config.budget) == (4, 2000)


def test_load_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError) as exc_info:
        load_config(str(tmp_path / "absent.cfg"))
    assert "Cannot read config file" in str(exc_info.value)


def test_config_from_env() -> None:
    config = config_from_env({"SMALLVALUE_SEED": "7", "SMALLVALUE_THREADS": "2"})
    assert (config.seed, config.threads) == (7, 2)

    with pytest.raises(ConfigError):
        config_from_env({"SMALLVALUE_THREADS": "zero"})


def test_config_from_process_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("SMALLVALUE_SEED", "11")
    assert config_from_env().seed == 11


def test_config_hash_ignores_threads_and_out() -> None:
    base = ExperimentConfig(seed=1, level=5)

    digest = config_hash(base, "bm-green")
    relocated = base.merged({"threads": 8, "out": "x.csv"})

    assert config_hash(relocated, "bm-green") == digest
    assert config_hash(base.merged({"seed": 2}), "bm-green") != digest
    assert config_hash(base, "disjoint") != digest
    assert len(digest) == 64
