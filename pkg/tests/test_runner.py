from pathlib import Path

import numpy as np

from sgfopt import runner
from sgfopt.config import parse_config
from sgfopt.fieldio import read_field, read_summary


def _config(tmp_path: Path, subcommand: str, extra: str = "", out: str = "out"):
    text = f"subcommand={subcommand}\ngrid=9\nnu=1.0\nalpha=0.05\nkappa_bar=1.0\nout={out}\n{extra}"
    return parse_config(text, base_dir=tmp_path)


def test_default_output_dir_names_parameters(tmp_path: Path) -> None:
    config = parse_config("subcommand=solve-state\ngrid=17\nnu=0.5\nalpha=0.01\nseed=3\n")

    assert runner.default_output_dir(config) == Path("out") / "solve-state-n17-nu0.5-a0.01-s3"


def test_solve_state_with_zero_control(tmp_path: Path) -> None:
    result = runner.run(_config(tmp_path, "solve-state"))

    assert result.exit_code == runner.EXIT_OK
    directory = tmp_path / "out"
    for name in ("psi.dat", "y.dat", "omega.dat", "diagnostics.csv", "summary.txt", "manifest.txt"):
        assert (directory / name).exists()
    assert np.all(read_field(directory / "y.dat").values == 0.0)
    summary = read_summary(directory / "summary.txt")
    assert summary["converged"] == "True"
    assert (directory / "diagnostics.csv").read_text().splitlines()[0] == "iter,residual,increment"


def test_manifest_echoes_config(tmp_path: Path) -> None:
    config = _config(tmp_path, "solve-state", "seed=5\n")
    runner.run(config)

    manifest = (tmp_path / "out" / "manifest.txt").read_text(encoding="utf-8")
    assert "subcommand=solve-state" in manifest
    assert "seed=5" in manifest
    assert "version=" in manifest
    assert manifest.rstrip("\n").endswith("seed=5")


def test_non_converged_state_writes_diagnostics(tmp_path: Path) -> None:
    config = _config(tmp_path, "solve-state", "control=manufactured\npicard_max_iters=1\n")

    result = runner.run(config)

    assert result.exit_code == runner.EXIT_NOT_CONVERGED
    directory = tmp_path / "out"
    assert len((directory / "diagnostics.csv").read_text().splitlines()) == 2
    assert read_summary(directory / "summary.txt")["converged"] == "False"


def test_linearize_and_adjoint_write_fields(tmp_path: Path) -> None:
    assert runner.run(_config(tmp_path, "linearize", "control=manufactured\n", out="lin")).exit_code == 0
    assert (tmp_path / "lin" / "z.dat").exists()

    result = runner.run(_config(tmp_path, "adjoint", "control=manufactured\ntarget=zero\n", out="adj"))

    assert result.exit_code == 0
    summary = read_summary(tmp_path / "adj" / "summary.txt")
    assert summary["mode"] == "discrete-transpose"
    assert float(summary["duality_gap"]) <= 1e-10
    assert (tmp_path / "adj" / "p.dat").exists()


def test_optimize_writes_trace_and_is_deterministic(tmp_path: Path) -> None:
    extra = "target=manufactured\n"
    first = runner.run(_config(tmp_path, "optimize", extra, out="a"))
    second = runner.run(_config(tmp_path, "optimize", extra, out="b"))

    assert first.exit_code == runner.EXIT_OK
    for name in ("trace.csv", "u_final.dat", "y_final.dat", "p_final.dat", "manifest.txt"):
        assert (tmp_path / "a" / name).exists()
    header = (tmp_path / "a" / "trace.csv").read_text().splitlines()[0]
    assert header == "iter,J,grad_norm,vi_residual,step"
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert (tmp_path / "a" / "summary.txt").read_bytes() == (tmp_path / "b" / "summary.txt").read_bytes()


def test_optimize_line_search_failure_keeps_partial_trace(tmp_path: Path) -> None:
    config = _config(tmp_path, "optimize", "target=manufactured\npicard_max_iters=1\nmin_step=1e-3\n")

    result = runner.run(config)

    assert result.exit_code == runner.EXIT_NOT_CONVERGED
    rows = (tmp_path / "out" / "trace.csv").read_text().splitlines()
    assert len(rows) == 2
    assert "error" in read_summary(tmp_path / "out" / "summary.txt")


def test_continuation_writes_alpha_directories(tmp_path: Path) -> None:
    config = _config(tmp_path, "continuation", "target=manufactured\nalpha_list=0.05,0\n")

    result = runner.run(config)

    assert result.exit_code == runner.EXIT_OK
    directory = tmp_path / "out"
    assert (directory / "alpha_00" / "trace.csv").exists()
    assert (directory / "alpha_01" / "u_final.dat").exists()
    assert (directory / "continuation.csv").exists()
    assert (directory / "admissible.csv").exists()


def test_constants_subcommand(tmp_path: Path) -> None:
    result = runner.run(_config(tmp_path, "constants"))

    summary = read_summary(tmp_path / "out" / "summary.txt")
    assert result.exit_code == 0
    assert float(summary["S2"]) > 0.22
    assert float(summary["kappa_bar"]) == 1.0


def test_optimize_regularized_writes_epsilon_table(tmp_path: Path) -> None:
    config = _config(tmp_path, "optimize-regularized", "target=manufactured\nepsilon_list=4h,2h\n")

    result = runner.run(config)

    assert result.exit_code == runner.EXIT_OK
    directory = tmp_path / "out"
    lines = (directory / "regularized.csv").read_text().splitlines()
    assert lines[0] == "epsilon,I,u_delta_l2,mollify_delta_l2,iterations"
    assert len(lines) == 3
    for name in ("u_eps0.dat", "u_eps1.dat", "trace_eps0.csv", "trace.csv"):
        assert (directory / name).exists()
    assert float(read_summary(directory / "summary.txt")["epsilons"]) == 2


def test_verify_writes_every_report(tmp_path: Path) -> None:
    result = runner.run(_config(tmp_path, "verify", "trials=20\n"))

    assert result.exit_code == runner.EXIT_OK
    directory = tmp_path / "out"
    for name in ("identities", "estimates", "gateaux", "lipschitz", "contraction", "manufactured"):
        assert (directory / f"{name}.csv").exists()
    summary = read_summary(directory / "summary.txt")
    assert {"identities_passed", "manufactured_order", "gateaux_slope", "estimate_violations"} <= set(summary)
