from pathlib import Path

import pytest

from sgfopt.config import DEFAULT_ALPHA_LIST, DEFAULT_EPSILON_LIST, load_config, parse_config


MINIMAL = "grid=17\nnu=1.0\nalpha=0.05\n"


def test_parse_minimal_config_uses_defaults() -> None:
    config = parse_config(MINIMAL)

    assert config.subcommand is None
    assert config.grid_size == 17
    assert config.params.nu == 1.0
    assert config.params.alpha == 0.05
    assert config.lam == 0.01
    assert config.control == "zero"
    assert config.target == "zero"
    assert config.manufactured == "poly-quartic"
    assert config.bounds.lower == (-100.0, -100.0)
    assert config.bounds.upper == (100.0, 100.0)
    assert config.solver.picard_tol == 1e-10
    assert config.solver.scheme == "auto"
    assert config.optimizer.opt_tol == 1e-6
    assert config.optimizer.adjoint_mode == "discrete"
    assert config.alpha_list == DEFAULT_ALPHA_LIST
    assert config.epsilon_list == DEFAULT_EPSILON_LIST
    assert config.kappa_bar is None
    assert config.trials == 100
    assert config.seed == 0
    assert config.workers == 1
    assert config.out is None


def test_parse_full_config() -> None:
    config = parse_config(
        """
subcommand=optimize
grid=33
nu=0.5
alpha=0   # 極限の問題
lambda=0.1
lower=-1,-2
upper=3
scheme=coupled
adjoint_mode=pde
alpha_list=0.2,0.1,0
epsilon_list=4h,0.1
kappa_bar=0.3
seed=7
workers=2
""".strip()
    )

    assert config.subcommand == "optimize"
    assert config.params.alpha == 0.0
    assert config.bounds.lower == (-1.0, -2.0)
    assert config.bounds.upper == (3.0, 3.0)
    assert config.solver.scheme == "coupled"
    assert config.optimizer.adjoint_mode == "pde"
    assert config.alpha_list == (0.2, 0.1, 0.0)
    assert config.epsilon_values() == pytest.approx((4 / 32, 0.1))
    assert config.kappa_bar == 0.3
    assert config.seed == 7
    assert config.workers == 2


def test_parse_config_rejects_negative_viscosity_with_line() -> None:
    with pytest.raises(ValueError, match=r"nu \(line 2\)"):
        parse_config("grid=17\nnu=-1\nalpha=0.05\n")


def test_parse_config_reports_all_duplicate_lines() -> None:
    with pytest.raises(ValueError, match=r"grid が重複しています \(lines 1, 4\)"):
        parse_config("grid=17\nnu=1\nalpha=0\ngrid=33\n")


def test_parse_config_rejects_unknown_key() -> None:
    with pytest.raises(ValueError, match=r"未知のキーです: reynolds \(line 4\)"):
        parse_config(MINIMAL + "reynolds=100\n")


def test_parse_config_rejects_missing_required_key() -> None:
    with pytest.raises(ValueError, match="必須キーがありません: alpha"):
        parse_config("grid=17\nnu=1\n")


def test_parse_config_rejects_empty_required_value() -> None:
    with pytest.raises(ValueError, match=r"nu \(line 2\)"):
        parse_config("grid=17\nnu=\nalpha=0.05\n")
    with pytest.raises(ValueError, match=r"alpha \(line 3\)"):
        parse_config("grid=17\nnu=1.0\nalpha=\n")


def test_parse_config_rejects_type_mismatch() -> None:
    with pytest.raises(ValueError, match=r"grid \(line 1\): 整数"):
        parse_config("grid=fine\nnu=1\nalpha=0\n")
    with pytest.raises(ValueError, match="picard_tol"):
        parse_config(MINIMAL + "picard_tol=-1\n")


def test_parse_config_rejects_coarse_grid() -> None:
    with pytest.raises(ValueError, match="grid"):
        parse_config("grid=5\nnu=1\nalpha=0\n")


def test_parse_config_rejects_bad_alpha_list() -> None:
    with pytest.raises(ValueError, match="alpha_list"):
        parse_config(MINIMAL + "alpha_list=0.1,0.2,0\n")
    with pytest.raises(ValueError, match="alpha_list"):
        parse_config(MINIMAL + "alpha_list=0.1,0.05\n")


def test_parse_config_rejects_bad_epsilon() -> None:
    with pytest.raises(ValueError, match="epsilon_list"):
        parse_config(MINIMAL + "epsilon_list=4h,wide\n")


def test_parse_config_rejects_unknown_subcommand() -> None:
    with pytest.raises(ValueError, match="サブコマンド"):
        parse_config(MINIMAL + "subcommand=train\n")


def test_field_path_must_exist(tmp_path: Path) -> None:
    with pytest.raises(ValueError, match="control"):
        parse_config(MINIMAL + "control=missing.dat\n", base_dir=tmp_path)

    (tmp_path / "u.dat").write_text("9 9 0.125\n")
    config = parse_config(MINIMAL + "control=u.dat\n", base_dir=tmp_path)
    assert config.control == tmp_path / "u.dat"


def test_load_config_resolves_paths_relative_to_file(tmp_path: Path) -> None:
    config_file = tmp_path / "run.ini"
    config_file.write_text(MINIMAL + "out=results\n", encoding="utf-8")

    config = load_config(config_file)

    assert config.out == tmp_path / "results"
    assert config.source_text == MINIMAL + "out=results\n"


def test_load_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.ini")


def test_sample_config_parses() -> None:
    root = Path(__file__).resolve().parents[1]
    config = load_config(root / "config.ini")

    assert config.grid_size == 33
    assert config.target == "manufactured"
