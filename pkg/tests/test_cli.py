import logging
from pathlib import Path

import pytest

from sgfopt import cli
from sgfopt.config import parse_config


MINIMAL = "grid=9\nnu=1.0\nalpha=0.05\n"


def test_resolve_log_level_accepts_known_level() -> None:
    level, warning_message = cli._resolve_log_level("warning")

    assert level == logging.WARNING
    assert warning_message is None


def test_resolve_log_level_warns_on_unknown_level() -> None:
    level, warning_message = cli._resolve_log_level("mystery")

    assert level == logging.INFO
    assert warning_message is not None


def test_parser_rejects_unknown_subcommand() -> None:
    with pytest.raises(SystemExit):
        cli.main(["train"])


def test_main_returns_exit_code_on_config_error(monkeypatch) -> None:
    def raise_config_error(_path):
        raise ValueError("bad config")

    monkeypatch.setattr(cli, "load_config", raise_config_error)

    assert cli.main(["solve-state"]) == 2


def test_main_returns_exit_code_on_missing_config(tmp_path: Path) -> None:
    assert cli.main(["solve-state", "-c", str(tmp_path / "missing.ini")]) == 2


@pytest.mark.parametrize(
    ("error_name", "exit_code"),
    [
        ("sgfopt.solvers.ConvergenceError", 3),
        ("sgfopt.solvers.SingularSystemError", 3),
        ("sgfopt.control.LineSearchError", 3),
        ("sgfopt.fieldio.ArtifactWriteError", 4),
    ],
)
def test_main_maps_errors_to_exit_codes(monkeypatch, error_name, exit_code) -> None:
    from importlib import import_module

    from sgfopt import runner

    module_name, class_name = error_name.rsplit(".", 1)
    error_type = getattr(import_module(module_name), class_name)

    def raise_error(_config):
        raise error_type("failed")

    monkeypatch.setattr(cli, "load_config", lambda _path: parse_config(MINIMAL))
    monkeypatch.setattr(runner, "run", raise_error)

    assert cli.main(["optimize"]) == exit_code


def test_main_applies_command_line_overrides(monkeypatch, tmp_path: Path) -> None:
    from sgfopt import runner

    seen = []

    def capture(config):
        seen.append(config)
        return runner.RunResult(exit_code=0, directory=config.out, paths=())

    monkeypatch.setattr(cli, "load_config", lambda _path: parse_config(MINIMAL))
    monkeypatch.setattr(runner, "run", capture)

    assert cli.main(["constants", "--seed", "9", "--out", str(tmp_path)]) == 0
    assert seen[0].subcommand == "constants"
    assert seen[0].seed == 9
    assert seen[0].out == tmp_path


def test_main_passes_unhandled_error(monkeypatch) -> None:
    from sgfopt import runner

    def raise_unhandled(_config) -> None:
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "load_config", lambda _path: parse_config(MINIMAL))
    monkeypatch.setattr(runner, "run", raise_unhandled)

    with pytest.raises(RuntimeError, match="boom"):
        cli.main(["solve-state"])


def test_main_runs_solve_state_end_to_end(tmp_path: Path) -> None:
    config_file = tmp_path / "config.ini"
    config_file.write_text(MINIMAL + "out=result\n", encoding="utf-8")

    assert cli.main(["solve-state", "-c", str(config_file)]) == 0
    assert (tmp_path / "result" / "psi.dat").exists()
