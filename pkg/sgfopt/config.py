from __future__ import annotations

from dataclasses import dataclass, field
import configparser
import logging
from pathlib import Path
import re
from typing import Optional, Union

from sgfopt.analysis import MANUFACTURED_CASES
from sgfopt.control import AdmissibleSet, OptimizerConfig
from sgfopt.grid import FluidParams, MIN_NODES
from sgfopt.solvers import SolverConfig


logger = logging.getLogger(__name__)

SECTION = "run"
DEFAULT_CONFIG_PATH = Path("config.ini")
SUBCOMMANDS = (
    "solve-state",
    "linearize",
    "adjoint",
    "optimize",
    "optimize-regularized",
    "continuation",
    "verify",
    "constants",
)
FIELD_KEYWORDS = ("zero", "manufactured")
REQUIRED_KEYS = ("grid", "nu", "alpha")
KNOWN_KEYS = (
    "subcommand",
    "grid",
    "nu",
    "alpha",
    "lambda",
    "control",
    "target",
    "manufactured",
    "lower",
    "upper",
    "picard_tol",
    "picard_max_iters",
    "relaxation",
    "pivot_tol",
    "scheme",
    "adjoint_mode",
    "opt_tol",
    "opt_max_iters",
    "initial_step",
    "armijo_c1",
    "backtrack",
    "min_step",
    "max_step",
    "vi_step",
    "alpha_list",
    "epsilon_list",
    "kappa_bar",
    "trials",
    "seed",
    "workers",
    "out",
)
DEFAULT_ALPHA_LIST = (0.1, 0.05, 0.025, 0.0125, 0.0)
DEFAULT_EPSILON_LIST = ("8h", "4h", "2h")
_LINE_PATTERN = re.compile(r"^\s*([^=#;\s][^=]*?)\s*=")

FieldSource = Union[str, Path]


@dataclass(frozen=True)
class RunConfig:
    subcommand: Optional[str]
    grid_size: int
    params: FluidParams
    lam: float
    control: FieldSource
    target: FieldSource
    manufactured: str
    bounds: AdmissibleSet
    solver: SolverConfig
    optimizer: OptimizerConfig
    alpha_list: tuple[float, ...]
    epsilon_list: tuple[str, ...]
    kappa_bar: Optional[float]
    trials: int
    seed: int
    workers: int
    out: Optional[Path]
    source_text: str = field(default="", repr=False)

    # 格子幅の倍数表記 ("4h") を含む epsilon を長さに変換する。
    def epsilon_values(self) -> tuple[float, ...]:
        h = 1.0 / (self.grid_size - 1)
        values = []
        for token in self.epsilon_list:
            if token.endswith("h"):
                values.append(float(token[:-1] or 1.0) * h)
            else:
                values.append(float(token))
        return tuple(values)


# 行番号つきでキーの出現位置を調べる。
def _index_lines(text: str) -> dict[str, list[int]]:
    """キーごとの出現行 (1 始まり) を返す。コメント行と空行は無視する。"""
    index: dict[str, list[int]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        match = _LINE_PATTERN.match(line)
        if match is None:
            raise ValueError(f"key=value 形式ではない行があります (line {number}): {stripped}")
        index.setdefault(match.group(1).strip().lower(), []).append(number)
    return index


class _Reader:
    """行番号つきのエラーを出しながら値を取り出す。"""

    def __init__(self, parser: configparser.ConfigParser, index: dict[str, list[int]]) -> None:
        self._parser = parser
        self._index = index

    def line(self, key: str) -> str:
        numbers = self._index.get(key)
        return f"line {numbers[0]}" if numbers else "未指定"

    def has(self, key: str) -> bool:
        return self._parser.has_option(SECTION, key) and bool(self._parser.get(SECTION, key).strip())

    def fail(self, key: str, message: str) -> ValueError:
        return ValueError(f"{key} ({self.line(key)}): {message}")

    def get_str(self, key: str, default: str) -> str:
        if not self.has(key):
            return default
        return self._parser.get(SECTION, key).strip()

    def get_float(self, key: str, default: Optional[float]) -> Optional[float]:
        if not self.has(key):
            return default
        try:
            return self._parser.getfloat(SECTION, key)
        except ValueError as exc:
            raise self.fail(key, "実数で指定してください。") from exc

    def get_int(self, key: str, default: int) -> int:
        if not self.has(key):
            return default
        try:
            return self._parser.getint(SECTION, key)
        except ValueError as exc:
            raise self.fail(key, "整数で指定してください。") from exc

    def get_pair(self, key: str, default: tuple[float, float]) -> tuple[float, float]:
        """"a" または "a,b" を 2 成分の組にする。"""
        if not self.has(key):
            return default
        tokens = [token.strip() for token in self._parser.get(SECTION, key).split(",")]
        try:
            values = [float(token) for token in tokens]
        except ValueError as exc:
            raise self.fail(key, "実数または実数 2 つのカンマ区切りで指定してください。") from exc
        if len(values) == 1:
            return (values[0], values[0])
        if len(values) == 2:
            return (values[0], values[1])
        raise self.fail(key, "成分は 1 つか 2 つで指定してください。")

    def get_float_list(self, key: str, default: tuple[float, ...]) -> tuple[float, ...]:
        if not self.has(key):
            return default
        try:
            return tuple(float(token) for token in self._parser.get(SECTION, key).split(","))
        except ValueError as exc:
            raise self.fail(key, "実数のカンマ区切りで指定してください。") from exc


def _parse_field_source(reader: _Reader, key: str, base_dir: Optional[Path]) -> FieldSource:
    value = reader.get_str(key, "zero")
    if value in FIELD_KEYWORDS:
        return value
    path = Path(value)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    if not path.exists():
        raise reader.fail(key, f"ファイルが見つかりません: {path}")
    return path


def _parse_epsilon_list(reader: _Reader) -> tuple[str, ...]:
    if not reader.has("epsilon_list"):
        return DEFAULT_EPSILON_LIST
    tokens = tuple(token.strip() for token in reader.get_str("epsilon_list", "").split(","))
    for token in tokens:
        number = token[:-1] if token.endswith("h") else token
        try:
            value = float(number or 1.0)
        except ValueError as exc:
            raise reader.fail("epsilon_list", f"実数または h の倍数 (例: 4h) で指定してください: {token}") from exc
        if value <= 0:
            raise reader.fail("epsilon_list", "正の値を指定してください。")
    return tokens


# key=value 形式の設定テキストを検証済みの RunConfig に変換する。
def parse_config(text: str, *, base_dir: Optional[Path] = None) -> RunConfig:
    """未知のキー、重複、型不一致、範囲外の値は行番号つきの ValueError にする。"""
    index = _index_lines(text)
    for key, numbers in index.items():
        if len(numbers) > 1:
            joined = ", ".join(str(n) for n in numbers)
            raise ValueError(f"{key} が重複しています (lines {joined})。")
        if key not in KNOWN_KEYS:
            raise ValueError(f"未知のキーです: {key} (line {numbers[0]})")
    missing = [key for key in REQUIRED_KEYS if key not in index]
    if missing:
        raise ValueError(f"必須キーがありません: {', '.join(missing)}")

    parser = configparser.ConfigParser(strict=True, interpolation=None, inline_comment_prefixes=("#",))
    parser.read_string(f"[{SECTION}]\n{text}")
    reader = _Reader(parser, index)

    subcommand = reader.get_str("subcommand", "") or None
    if subcommand is not None and subcommand not in SUBCOMMANDS:
        raise reader.fail("subcommand", f"未対応のサブコマンドです: {subcommand}")

    grid_size = reader.get_int("grid", 0)
    if grid_size < MIN_NODES:
        raise reader.fail("grid", f"{MIN_NODES} 以上を指定してください。")
    nu = reader.get_float("nu", None)
    if nu is None or not nu > 0:
        raise reader.fail("nu", "nu > 0 を満たす値を指定してください。")
    alpha = reader.get_float("alpha", None)
    if alpha is None or not alpha >= 0:
        raise reader.fail("alpha", "alpha ≥ 0 を満たす値を指定してください。")
    lam = reader.get_float("lambda", 0.01)
    if not lam >= 0:
        raise reader.fail("lambda", "lambda ≥ 0 を満たす値を指定してください。")

    manufactured = reader.get_str("manufactured", MANUFACTURED_CASES[0])
    if manufactured not in MANUFACTURED_CASES:
        raise reader.fail("manufactured", f"候補は {', '.join(MANUFACTURED_CASES)} です。")

    try:
        bounds = AdmissibleSet(reader.get_pair("lower", (-100.0, -100.0)), reader.get_pair("upper", (100.0, 100.0)))
    except ValueError as exc:
        raise reader.fail("lower", str(exc)) from exc
    try:
        solver = SolverConfig(
            picard_tol=reader.get_float("picard_tol", 1e-10),
            picard_max_iters=reader.get_int("picard_max_iters", 200),
            relaxation=reader.get_float("relaxation", 1.0),
            pivot_tol=reader.get_float("pivot_tol", 1.0),
            scheme=reader.get_str("scheme", "auto"),
        )
    except ValueError as exc:
        raise ValueError(f"ソルバ設定が不正です: {exc}") from exc
    try:
        optimizer = OptimizerConfig(
            opt_tol=reader.get_float("opt_tol", 1e-6),
            max_iterations=reader.get_int("opt_max_iters", 200),
            initial_step=reader.get_float("initial_step", 1.0),
            armijo_c1=reader.get_float("armijo_c1", 1e-4),
            backtrack=reader.get_float("backtrack", 0.5),
            min_step=reader.get_float("min_step", 1e-12),
            max_step=reader.get_float("max_step", 1e6),
            vi_step=reader.get_float("vi_step", 1.0),
            adjoint_mode=reader.get_str("adjoint_mode", "discrete"),
        )
    except ValueError as exc:
        raise ValueError(f"最適化設定が不正です: {exc}") from exc

    alpha_list = reader.get_float_list("alpha_list", DEFAULT_ALPHA_LIST)
    if not alpha_list or alpha_list[-1] != 0.0 or any(b >= a for a, b in zip(alpha_list, alpha_list[1:])):
        raise reader.fail("alpha_list", "狭義単調減少で 0 で終わる列を指定してください。")

    kappa_bar = reader.get_float("kappa_bar", None)
    if kappa_bar is not None and not kappa_bar > 0:
        raise reader.fail("kappa_bar", "正の値を指定してください。")
    trials = reader.get_int("trials", 100)
    if trials < 20:
        raise reader.fail("trials", "20 以上を指定してください。")
    workers = reader.get_int("workers", 1)
    if workers < 1:
        raise reader.fail("workers", "1 以上を指定してください。")
    out_value = reader.get_str("out", "")
    out = None
    if out_value:
        out = Path(out_value)
        if not out.is_absolute() and base_dir is not None:
            out = base_dir / out

    return RunConfig(
        subcommand=subcommand,
        grid_size=grid_size,
        params=FluidParams(nu, alpha),
        lam=lam,
        control=_parse_field_source(reader, "control", base_dir),
        target=_parse_field_source(reader, "target", base_dir),
        manufactured=manufactured,
        bounds=bounds,
        solver=solver,
        optimizer=optimizer,
        alpha_list=alpha_list,
        epsilon_list=_parse_epsilon_list(reader),
        kappa_bar=kappa_bar,
        trials=trials,
        seed=reader.get_int("seed", 0),
        workers=workers,
        out=out,
        source_text=text,
    )


# 設定ファイルを読み込む。
def load_config(path: Path) -> RunConfig:
    """相対パスは設定ファイルのディレクトリを基準に解決する。"""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    logger.debug("設定ファイルを読み込みました: %s", path)
    return parse_config(text, base_dir=path.parent)
