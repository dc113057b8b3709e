from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
import threading
import time
from typing import Callable, Optional

import numpy as np

from sgfopt import __version__
from sgfopt.analysis import (
    ControlProblem,
    ProbeReport,
    admissible_convergence,
    check_smallness,
    continuation_alpha,
    contraction_audit,
    estimate_constants,
    gateaux_probe,
    identity_convergence,
    lipschitz_probe,
    manufactured_case,
    manufactured_convergence,
    manufactured_velocity,
    random_control,
    smallness_sweep,
    verify_identities,
    verify_state_estimates,
)
from sgfopt.config import RunConfig
from sgfopt.control import (
    CostSpec,
    LineSearchError,
    MollifierSpec,
    OptimizationTrace,
    mollify,
    optimize,
    optimize_regularized,
    project_admissible,
)
from sgfopt.fieldio import ArtifactWriteError, read_vector_field, write_csv, write_field, write_summary
from sgfopt.grid import Field, Grid, VectorField, hcurl_norm, inner_product, make_grid, norms
from sgfopt.solvers import (
    ConvergenceError,
    StateSolution,
    solve_adjoint_discrete,
    solve_adjoint_pde,
    solve_linearized,
    solve_state,
)


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 3
STATE_DIAGNOSTICS_HEADER = ("iter", "residual", "increment")
TRACE_HEADER = ("iter", "J", "grad_norm", "vi_residual", "step")
_MKDIR_LOCK = threading.Lock()


@dataclass
class Artifacts:
    """1 回の実行で書き出す場・表・サマリ。"""

    subcommand: str
    fields: dict[str, Field] = field(default_factory=dict)
    tables: dict[str, tuple[tuple[str, ...], list[tuple[object, ...]]]] = field(default_factory=dict)
    summary: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class RunResult:
    exit_code: int
    directory: Path
    paths: tuple[Path, ...]


def default_output_dir(config: RunConfig) -> Path:
    """サブコマンドと主要パラメータから決まる出力先。"""
    params = config.params
    return Path("out") / f"{config.subcommand}-n{config.grid_size}-nu{params.nu:g}-a{params.alpha:g}-s{config.seed}"


def _ensure_directory(directory: Path) -> None:
    try:
        with _MKDIR_LOCK:
            directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactWriteError(f"出力ディレクトリを作成できません: {directory}") from exc


# 成果物をディレクトリに書き出す。
def write_outputs(artifacts: Artifacts, directory: Path) -> list[Path]:
    """ファイル名は場が <name>.dat、表が <name>.csv、サマリが summary.txt。"""
    directory = Path(directory)
    _ensure_directory(directory)
    paths = []
    for name, value in artifacts.fields.items():
        paths.append(write_field(value, directory / f"{name}.dat"))
    for name, (header, rows) in artifacts.tables.items():
        paths.append(write_csv(directory / f"{name}.csv", header, rows))
    if artifacts.summary:
        paths.append(write_summary(directory / "summary.txt", artifacts.summary))
    return paths


def write_manifest(directory: Path, config: RunConfig, wall_time: float) -> Path:
    """設定の写し、バージョン、seed、実行時間を manifest.txt に記録する。"""
    lines = [
        f"subcommand={config.subcommand}",
        f"version={__version__}",
        f"seed={config.seed}",
        f"wall_time_seconds={wall_time:.3f}",
        "# --- config ---",
        config.source_text.rstrip("\n"),
    ]
    path = Path(directory) / "manifest.txt"
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactWriteError(f"manifest の書き出しに失敗しました: {path}") from exc
    return path


def _control_field(config: RunConfig, grid: Grid) -> VectorField:
    source = config.control
    if source == "zero":
        return VectorField.zeros(grid)
    if source == "manufactured":
        return manufactured_case(config.manufactured, config.params, grid)[1]
    return read_vector_field(Path(source), grid)


def _target_field(config: RunConfig, grid: Grid) -> VectorField:
    source = config.target
    if source == "zero":
        return VectorField.zeros(grid)
    if source == "manufactured":
        return manufactured_velocity(config.manufactured, grid)
    return read_vector_field(Path(source), grid)


def _state_artifacts(artifacts: Artifacts, state: StateSolution) -> None:
    artifacts.fields.update({"psi": state.psi, "y": state.y, "omega": state.omega})
    artifacts.tables["diagnostics"] = (STATE_DIAGNOSTICS_HEADER, state.diagnostics_rows())
    artifacts.summary.update(
        {
            "converged": state.converged,
            "iterations": state.iterations,
            "residual": state.residual,
            "scheme": state.scheme,
        }
    )


def _report_table(artifacts: Artifacts, name: str, report: ProbeReport) -> None:
    artifacts.tables[name] = (report.header, list(report.rows))
    artifacts.summary[f"{name}_passed"] = report.passed
    for key, value in report.measured.items():
        artifacts.summary[f"{name}_{key}"] = value


def _solve_control_state(config: RunConfig, grid: Grid, artifacts: Artifacts) -> Optional[StateSolution]:
    state = solve_state(_control_field(config, grid), config.params, config.solver)
    _state_artifacts(artifacts, state)
    return state if state.converged else None


# 状態方程式を解く。
def _run_solve_state(config: RunConfig, grid: Grid, artifacts: Artifacts) -> int:
    state = _solve_control_state(config, grid, artifacts)
    if config.control == "manufactured":
        psi_exact, _ = manufactured_case(config.manufactured, config.params, grid)
        artifacts.summary["psi_l2_error"] = norms(artifacts.fields["psi"] - psi_exact).l2
    artifacts.summary["y_h1"] = norms(artifacts.fields["y"]).h1_semi
    return EXIT_OK if state is not None else EXIT_NOT_CONVERGED


def _run_linearize(config: RunConfig, grid: Grid, artifacts: Artifacts) -> int:
    state = _solve_control_state(config, grid, artifacts)
    if state is None:
        return EXIT_NOT_CONVERGED
    w = random_control(grid, np.random.default_rng(config.seed))
    linearized = solve_linearized(state, w, config.params, config.solver)
    artifacts.fields.update({"w": w, "z": linearized.z, "chi": linearized.chi, "zeta": linearized.zeta})
    artifacts.summary["z_h1"] = norms(linearized.z).h1_semi
    return EXIT_OK


# 追跡誤差を負荷とする随伴方程式を解き、双対性を確認する。
def _run_adjoint(config: RunConfig, grid: Grid, artifacts: Artifacts) -> int:
    state = _solve_control_state(config, grid, artifacts)
    if state is None:
        return EXIT_NOT_CONVERGED
    load = state.y - _target_field(config, grid)
    solve = solve_adjoint_discrete if config.optimizer.adjoint_mode == "discrete" else solve_adjoint_pde
    adjoint = solve(state, load, config.params, config.solver)
    w = random_control(grid, np.random.default_rng(config.seed))
    z = solve_linearized(state, w, config.params, config.solver).z
    lhs = inner_product(load, z)
    rhs = inner_product(w, adjoint.p)
    scale = max(norms(load).l2 * norms(w).l2, 1e-300)
    artifacts.fields.update({"p": adjoint.p, "q": adjoint.q})
    artifacts.summary.update({"mode": adjoint.mode, "duality_gap": abs(lhs - rhs) / scale})
    return EXIT_OK


def _kappa_bar(config: RunConfig, grid: Grid) -> float:
    if config.kappa_bar is not None:
        return config.kappa_bar
    return estimate_constants(grid, max(config.trials, 100), config.seed).kappa_bar


def _trace_artifacts(artifacts: Artifacts, trace: OptimizationTrace, prefix: str = "") -> None:
    artifacts.tables[f"{prefix}trace"] = (TRACE_HEADER, trace.rows())
    artifacts.fields.update(
        {
            f"{prefix}u_final": trace.control,
            f"{prefix}y_final": trace.state.y,
            f"{prefix}p_final": trace.adjoint.p,
        }
    )


def _optimize(config: RunConfig, grid: Grid, kappa_bar: float) -> OptimizationTrace:
    spec = CostSpec(config.lam, _target_field(config, grid))
    u0 = project_admissible(_control_field(config, grid), config.bounds)
    return optimize(u0, spec, config.bounds, config.params, config.solver, config.optimizer, kappa_bar=kappa_bar)


# 射影勾配法で最適制御を求める。
def _run_optimize(config: RunConfig, grid: Grid, artifacts: Artifacts) -> int:
    kappa_bar = _kappa_bar(config, grid)
    try:
        trace = _optimize(config, grid, kappa_bar)
    except LineSearchError as exc:
        if exc.trace is not None:
            _trace_artifacts(artifacts, exc.trace)
        artifacts.summary["error"] = str(exc)
        return EXIT_NOT_CONVERGED
    _trace_artifacts(artifacts, trace)
    artifacts.summary.update(
        {
            "final_J": trace.final_cost,
            "iterations": trace.iterations,
            "converged": trace.converged,
            "vi_residual": trace.records[-1].vi_residual,
            "u_hcurl": hcurl_norm(trace.control),
            "kappa_bar": kappa_bar,
            "smallness_margin": trace.smallness_margin,
            "smallness": "holds" if trace.smallness_margin is not None and trace.smallness_margin > 0 else "fails",
        }
    )
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


# 軟化子の半径を変えながら近似問題を解く。
def _run_optimize_regularized(config: RunConfig, grid: Grid, artifacts: Artifacts) -> int:
    kappa_bar = _kappa_bar(config, grid)
    reference = _optimize(config, grid, kappa_bar)
    _trace_artifacts(artifacts, reference)
    spec = CostSpec(config.lam, _target_field(config, grid))
    u0 = project_admissible(_control_field(config, grid), config.bounds)
    rows = []
    exit_code = EXIT_OK if reference.converged else EXIT_NOT_CONVERGED
    for index, epsilon in enumerate(config.epsilon_values()):
        mollifier = MollifierSpec(epsilon)
        trace = optimize_regularized(
            u0, reference.control, spec, config.bounds, config.params, config.solver, mollifier, config.optimizer,
            kappa_bar=kappa_bar,
        )
        artifacts.fields[f"u_eps{index}"] = trace.control
        artifacts.tables[f"trace_eps{index}"] = (TRACE_HEADER, trace.rows())
        rows.append(
            (
                epsilon,
                trace.final_cost,
                norms(trace.control - reference.control).l2,
                norms(mollify(trace.control, mollifier) - trace.control).l2,
                trace.iterations,
            )
        )
        if not trace.converged:
            exit_code = EXIT_NOT_CONVERGED
    artifacts.tables["regularized"] = (("epsilon", "I", "u_delta_l2", "mollify_delta_l2", "iterations"), rows)
    artifacts.summary.update({"reference_J": reference.final_cost, "epsilons": len(rows)})
    return exit_code


def _alpha_writer(
    directory: Path,
    collected: dict[float, OptimizationTrace],
) -> Callable[[int, float, OptimizationTrace], None]:
    """α ごとに別サブディレクトリへ書き出す (ワーカー間で共有ファイルなし)。"""

    def write(index: int, alpha: float, trace: OptimizationTrace) -> None:
        collected[alpha] = trace
        partial = Artifacts(subcommand="continuation")
        _trace_artifacts(partial, trace)
        partial.summary.update({"alpha": alpha, "final_J": trace.final_cost, "converged": trace.converged})
        write_outputs(partial, directory / f"alpha_{index:02d}")

    return write


# α を 0 まで減らす連続化を実行する。
def _run_continuation(config: RunConfig, grid: Grid, artifacts: Artifacts, directory: Path) -> int:
    kappa_bar = _kappa_bar(config, grid)
    collected: dict[float, OptimizationTrace] = {}
    problem = ControlProblem(
        cost=CostSpec(config.lam, _target_field(config, grid)),
        bounds=config.bounds,
        u0=project_admissible(_control_field(config, grid), config.bounds),
        solver=config.solver,
        kappa_bar=kappa_bar,
    )
    report = continuation_alpha(
        problem,
        config.alpha_list,
        config.params,
        config.optimizer,
        workers=config.workers,
        on_result=_alpha_writer(directory, collected),
    )
    _report_table(artifacts, "continuation", report)
    artifacts.summary.update(report.notes)
    if "aborted" in report.notes:
        return EXIT_NOT_CONVERGED
    fixed = admissible_convergence(collected[0.0].control, config.alpha_list, config.params.nu, config.solver)
    _report_table(artifacts, "admissible", fixed)
    return EXIT_OK


# 解析スイートの監査を一括実行する。
def _run_verify(config: RunConfig, grid: Grid, artifacts: Artifacts) -> int:
    n = config.grid_size
    params = config.params
    constants = estimate_constants(grid, max(config.trials, 100), config.seed, config.kappa_bar)
    artifacts.summary.update({"S2": constants.s2, "S4": constants.s4, "kappa_bar": constants.kappa_bar})

    alpha = params.alpha if params.alpha > 0 else 0.05
    sizes = (n, 2 * (n - 1) + 1, 4 * (n - 1) + 1)
    _report_table(artifacts, "identities", identity_convergence(sizes, config.seed, config.trials, alpha))
    constants_report = verify_identities(grid, config.seed, config.trials, alpha, constants)
    for key in ("interpolation_c", "trilinear_kappa", "energy_neutrality"):
        artifacts.summary[f"identities_{key}"] = constants_report.measured.get(key, float("nan"))

    rng = np.random.default_rng(config.seed)
    estimate_rows = []
    violations = 0
    controls = [random_control(grid, rng, amplitude=rng.uniform(0.5, 5.0)) for _ in range(50)]
    for index, u in enumerate(controls):
        state = solve_state(u, params, config.solver)
        if not state.converged:
            raise ConvergenceError(f"監査用制御 {index} の状態解が収束しませんでした。")
        report = verify_state_estimates(state, u, params, constants)
        violations += sum(not record.passed for record in report.inequalities)
        estimate_rows.extend((index, r.name, r.lhs, r.rhs, r.slack) for r in report.inequalities)
    artifacts.tables["estimates"] = (("control", "name", "lhs", "rhs", "slack"), estimate_rows)
    artifacts.summary["estimate_violations"] = violations

    gateaux = gateaux_probe(controls[0], controls[1], (1e-1, 1e-2, 1e-3), params, config.solver)
    _report_table(artifacts, "gateaux", gateaux)

    lipschitz_rows = []
    lipschitz_violations = 0
    for index in range(0, 10, 2):
        u1, u2 = controls[index], controls[index + 1]
        verdict = check_smallness(u2, params, constants)
        if not verdict.holds:
            continue
        report = lipschitz_probe(u1, u2, params, config.solver, constants)
        lipschitz_violations += int(not report.passed)
        lipschitz_rows.extend(report.rows)
    artifacts.tables["lipschitz"] = (("ratio", "bound", "slack", "v2_ratio"), lipschitz_rows)
    artifacts.summary["lipschitz_violations"] = lipschitz_violations

    try:
        sweep = smallness_sweep(controls[0], controls[1], params, config.solver, constants)
        _report_table(artifacts, "smallness_sweep", sweep)
    except ConvergenceError as exc:
        logger.warning("小ささ条件の掃引を打ち切りました: %s", exc)
        artifacts.summary["smallness_sweep_error"] = str(exc)
    _report_table(artifacts, "contraction", contraction_audit(controls[:10], params, config.solver, constants))

    refined = (n, 2 * (n - 1) + 1)
    _report_table(artifacts, "manufactured", manufactured_convergence(config.manufactured, params, refined, config.solver))
    return EXIT_OK


def _run_constants(config: RunConfig, grid: Grid, artifacts: Artifacts) -> int:
    constants = estimate_constants(grid, max(config.trials, 100), config.seed, config.kappa_bar)
    artifacts.summary.update({"S2": constants.s2, "S4": constants.s4, "kappa_bar": constants.kappa_bar})
    artifacts.summary.update({f"note_{key}": value for key, value in constants.notes.items()})
    return EXIT_OK


_HANDLERS = {
    "solve-state": _run_solve_state,
    "linearize": _run_linearize,
    "adjoint": _run_adjoint,
    "optimize": _run_optimize,
    "optimize-regularized": _run_optimize_regularized,
    "verify": _run_verify,
    "constants": _run_constants,
}


# サブコマンドを実行し、成果物と manifest を書き出す。
def run(config: RunConfig) -> RunResult:
    """解が収束しない場合も診断ファイルを書いてから終了コード 3 を返す。"""
    if config.subcommand is None:
        raise ValueError("サブコマンドが指定されていません。")
    grid = make_grid(config.grid_size, config.grid_size)
    directory = config.out if config.out is not None else default_output_dir(config)
    _ensure_directory(directory)
    artifacts = Artifacts(subcommand=config.subcommand)
    started = time.perf_counter()
    logger.info("%s を開始します (n=%d, nu=%g, alpha=%g)。", config.subcommand, config.grid_size, config.params.nu, config.params.alpha)

    try:
        if config.subcommand == "continuation":
            exit_code = _run_continuation(config, grid, artifacts, directory)
        else:
            exit_code = _HANDLERS[config.subcommand](config, grid, artifacts)
    finally:
        paths = write_outputs(artifacts, directory)
        paths.append(write_manifest(directory, config, time.perf_counter() - started))

    if exit_code != EXIT_OK:
        logger.error("%s は収束しませんでした。診断ファイル: %s", config.subcommand, directory)
    else:
        logger.info("%s が完了しました: %s", config.subcommand, directory)
    return RunResult(exit_code=exit_code, directory=directory, paths=tuple(paths))
