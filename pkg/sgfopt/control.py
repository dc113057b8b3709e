from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Callable, Literal, Optional, Union

import numpy as np
from scipy import ndimage

from sgfopt.grid import (
    FluidParams,
    Grid,
    ScalarField,
    VectorField,
    curl_adjoint,
    curl_vector,
    inner_product,
    norms,
)
from sgfopt.solvers import (
    AdjointSolution,
    ConvergenceError,
    SolverConfig,
    StateSolution,
    smallness_margin,
    solve_adjoint_discrete,
    solve_adjoint_pde,
    solve_state,
)


logger = logging.getLogger(__name__)

AdjointMode = Literal["discrete", "pde"]


class LineSearchError(RuntimeError):
    def __init__(self, message: str, trace: Optional["OptimizationTrace"] = None) -> None:
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class CostSpec:
    lam: float
    target: VectorField

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ValueError(f"lambda は 0 以上を指定してください (lambda={self.lam})。")


@dataclass(frozen=True)
class AdmissibleSet:
    """成分ごとの箱型制約 lower ≤ u_k ≤ upper。"""

    lower: tuple[float, float]
    upper: tuple[float, float]

    def __post_init__(self) -> None:
        if len(self.lower) != 2 or len(self.upper) != 2:
            raise ValueError("lower/upper は 2 成分で指定してください。")
        if not all(np.isfinite(self.lower)) or not all(np.isfinite(self.upper)):
            raise ValueError("lower/upper は有限値で指定してください。")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"lower {self.lower} が upper {self.upper} を超えています。")


@dataclass(frozen=True)
class MollifierSpec:
    epsilon: float

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon は正の値を指定してください (epsilon={self.epsilon})。")

    # 格子上にサンプルした多項式バンプ核を作る。
    def kernel(self, grid: Grid) -> np.ndarray:
        """(1 − (r/ε)²)² を r ≤ ε でサンプルし、総和 1 に正規化した核を返す。"""
        if self.epsilon < grid.h * (1.0 - 1e-12):
            raise ValueError(f"epsilon={self.epsilon:.4g} が格子幅 h={grid.h:.4g} より小さく、核を解像できません。")
        reach = int(np.floor(self.epsilon / grid.h + 1e-9))
        offsets = np.arange(-reach, reach + 1) * grid.h
        r2 = (offsets[:, None] ** 2 + offsets[None, :] ** 2) / self.epsilon**2
        weights = np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)
        return weights / weights.sum()


@dataclass(frozen=True)
class OptimizerConfig:
    opt_tol: float = 1e-6
    max_iterations: int = 200
    initial_step: float = 1.0
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-12
    max_step: float = 1e6
    vi_step: float = 1.0
    adjoint_mode: AdjointMode = "discrete"

    def __post_init__(self) -> None:
        if not self.opt_tol > 0:
            raise ValueError("opt_tol は正の値を指定してください。")
        if self.max_iterations < 0:
            raise ValueError("opt_max_iters は 0 以上を指定してください。")
        if not 0.0 < self.armijo_c1 < 1.0:
            raise ValueError("armijo_c1 は 0 < c₁ < 1 の範囲で指定してください。")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack は 0 < β < 1 の範囲で指定してください。")
        if not 0.0 < self.min_step <= self.initial_step <= self.max_step:
            raise ValueError("min_step ≤ initial_step ≤ max_step を満たすように指定してください。")
        if not self.vi_step > 0:
            raise ValueError("vi_step は正の値を指定してください。")
        if self.adjoint_mode not in {"discrete", "pde"}:
            raise ValueError(f"未対応の adjoint_mode です: {self.adjoint_mode}")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    cost: float
    grad_norm: float
    vi_residual: float
    step: float


@dataclass(frozen=True, eq=False)
class OptimizationTrace:
    records: tuple[TraceRecord, ...]
    control: VectorField
    state: StateSolution
    adjoint: AdjointSolution
    converged: bool
    smallness_margin: Optional[float] = None
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def final_cost(self) -> float:
        return self.records[-1].cost

    @property
    def iterations(self) -> int:
        return self.records[-1].iteration

    def rows(self) -> list[tuple[int, float, float, float, float]]:
        """トレースCSV (iter,J,grad_norm,vi_residual,step) の行。"""
        return [(r.iteration, r.cost, r.grad_norm, r.vi_residual, r.step) for r in self.records]


@dataclass(frozen=True)
class _Evaluation:
    cost: float
    gradient: VectorField
    state: StateSolution
    adjoint: AdjointSolution


def _tracking_cost(state: StateSolution, u: VectorField, spec: CostSpec) -> float:
    mismatch = state.y - spec.target
    return 0.5 * inner_product(mismatch, mismatch) + 0.5 * spec.lam * inner_product(u, u)


def _converged_state(
    u: VectorField,
    params: FluidParams,
    cfg: SolverConfig,
    psi0: Optional[ScalarField] = None,
) -> StateSolution:
    state = solve_state(u, params, cfg, psi0=psi0)
    if not state.converged:
        raise ConvergenceError(
            f"状態方程式が収束しませんでした (iterations={state.iterations}, residual={state.residual:.3e})。"
        )
    return state


def _adjoint(state: StateSolution, load: VectorField, params: FluidParams, cfg: SolverConfig, mode: str) -> AdjointSolution:
    if mode == "discrete":
        return solve_adjoint_discrete(state, load, params, cfg)
    if mode == "pde":
        return solve_adjoint_pde(state, load, params, cfg)
    raise ValueError(f"未対応の adjoint mode です: {mode}")


# 縮約コスト J(u) = ½‖y(u) − y_d‖² + (λ/2)‖u‖² を評価する。
def reduced_cost(u: VectorField, spec: CostSpec, params: FluidParams, cfg: SolverConfig = SolverConfig()) -> float:
    """状態方程式が収束しない場合は ConvergenceError を送出する。"""
    return _tracking_cost(_converged_state(u, params, cfg), u, spec)


def _evaluate(
    u: VectorField,
    spec: CostSpec,
    params: FluidParams,
    cfg: SolverConfig,
    mode: str,
    psi0: Optional[ScalarField] = None,
) -> _Evaluation:
    state = _converged_state(u, params, cfg, psi0)
    adjoint = _adjoint(state, state.y - spec.target, params, cfg, mode)
    return _Evaluation(
        cost=_tracking_cost(state, u, spec),
        gradient=adjoint.p + spec.lam * u,
        state=state,
        adjoint=adjoint,
    )


# 随伴状態から縮約勾配 p + λu を求める。
def reduced_gradient(
    u: VectorField,
    spec: CostSpec,
    params: FluidParams,
    cfg: SolverConfig = SolverConfig(),
    mode: AdjointMode = "discrete",
) -> VectorField:
    """L² 内積を Riesz 写像とした勾配を返す。"""
    return _evaluate(u, spec, params, cfg, mode).gradient


def project_admissible(u: VectorField, bounds: AdmissibleSet) -> VectorField:
    clipped = np.stack(
        [np.clip(u.values[k], bounds.lower[k], bounds.upper[k]) for k in range(2)]
    )
    return VectorField(u.grid, clipped)


# 変分不等式の残差 ‖u − P(u − s g)‖ / s を計算する。
def vi_residual(u: VectorField, g: VectorField, bounds: AdmissibleSet, step: float = 1.0) -> float:
    if not step > 0:
        raise ValueError(f"step は正の値を指定してください (step={step})。")
    projected = project_admissible(u - step * g, bounds)
    return norms(u - projected).l2 / step


def _barzilai_borwein(
    step_vector: VectorField,
    gradient_change: VectorField,
    opt_cfg: OptimizerConfig,
) -> float:
    curvature = inner_product(step_vector, gradient_change)
    if curvature <= 0.0:
        return opt_cfg.initial_step
    step = inner_product(step_vector, step_vector) / curvature
    return float(np.clip(step, opt_cfg.min_step, opt_cfg.max_step))


def _log_smallness(u: VectorField, params: FluidParams, kappa_bar: Optional[float], iteration: int) -> Optional[float]:
    if kappa_bar is None:
        return None
    margin = smallness_margin(u, params, kappa_bar)
    if margin <= 0.0:
        logger.warning("小ささ条件を満たしていません (iter=%d, margin=%.3e, kappa_bar=%.4g)。", iteration, margin, kappa_bar)
    return margin


# Armijo バックトラックと BB ステップによる射影勾配法。
def _projected_gradient(
    evaluate: Callable[[VectorField, Optional[ScalarField]], _Evaluation],
    u0: VectorField,
    bounds: AdmissibleSet,
    params: FluidParams,
    opt_cfg: OptimizerConfig,
    kappa_bar: Optional[float],
    label: str,
) -> OptimizationTrace:
    u = project_admissible(u0, bounds)
    if norms(u - u0).linf > 0.0:
        logger.warning("初期制御が許容集合の外にあったため射影しました。")
    current = evaluate(u, None)
    margin = _log_smallness(u, params, kappa_bar, 0)
    records: list[TraceRecord] = []
    step = opt_cfg.initial_step
    taken = 0.0
    converged = False

    iteration = 0
    while True:
        residual = vi_residual(u, current.gradient, bounds, opt_cfg.vi_step)
        records.append(
            TraceRecord(iteration, current.cost, norms(current.gradient).l2, residual, taken)
        )
        logger.debug("%s iter=%d J=%.6e vi=%.3e step=%.3e", label, iteration, current.cost, residual, taken)
        if residual <= opt_cfg.opt_tol:
            converged = True
            break
        if iteration >= opt_cfg.max_iterations:
            break

        trial_step = step
        while True:
            trial_u = project_admissible(u - trial_step * current.gradient, bounds)
            direction = trial_u - u
            decrease = opt_cfg.armijo_c1 * inner_product(current.gradient, direction)
            trial: Optional[_Evaluation]
            try:
                trial = evaluate(trial_u, current.state.psi)
            except ConvergenceError:
                logger.warning("%s: 試行点で状態方程式が収束しないためステップを縮小します (step=%.3e)。", label, trial_step)
                trial = None
            if trial is not None and trial.cost <= current.cost + decrease:
                break
            trial_step *= opt_cfg.backtrack
            if trial_step < opt_cfg.min_step:
                trace = OptimizationTrace(
                    tuple(records), u, current.state, current.adjoint, False, margin,
                    {"stop": "line-search"},
                )
                raise LineSearchError(f"{label}: 直線探索のステップが下限 {opt_cfg.min_step:g} を下回りました。", trace)

        step = _barzilai_borwein(direction, trial.gradient - current.gradient, opt_cfg)
        u = trial_u
        current = trial
        taken = trial_step
        iteration += 1
        margin = _log_smallness(u, params, kappa_bar, iteration)

    logger.info(
        "%s: %s (iterations=%d, J=%.6e, vi=%.3e)",
        label,
        "収束しました" if converged else "反復上限に達しました",
        iteration,
        current.cost,
        records[-1].vi_residual,
    )
    return OptimizationTrace(
        tuple(records),
        u,
        current.state,
        current.adjoint,
        converged,
        margin,
        {"stop": "converged" if converged else "max-iterations"},
    )


# 縮約コストを射影勾配法で最小化する。
def optimize(
    u0: VectorField,
    spec: CostSpec,
    bounds: AdmissibleSet,
    params: FluidParams,
    cfg: SolverConfig = SolverConfig(),
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    *,
    kappa_bar: Optional[float] = None,
) -> OptimizationTrace:
    """vi_residual ≤ opt_tol で停止する。kappa_bar を渡すと小ささ条件を記録する。"""

    def evaluate(u: VectorField, psi0: Optional[ScalarField]) -> _Evaluation:
        return _evaluate(u, spec, params, cfg, opt_cfg.adjoint_mode, psi0)

    return _projected_gradient(evaluate, u0, bounds, params, opt_cfg, kappa_bar, "optimize")


# 離散畳み込みで軟化子を適用する。
def mollify(field: Union[ScalarField, VectorField], spec: MollifierSpec) -> Union[ScalarField, VectorField]:
    """領域外はゼロ拡張。重み付き内積について自己随伴かつ非拡大になるよう台形重みで対称化する。"""
    grid = field.grid
    kernel = spec.kernel(grid)
    scale = np.sqrt(grid.weights) / grid.h

    def smooth(values: np.ndarray) -> np.ndarray:
        return ndimage.convolve(values * scale, kernel, mode="constant", cval=0.0) / scale

    if isinstance(field, ScalarField):
        return ScalarField(grid, smooth(field.values))
    return VectorField(grid, np.stack([smooth(field.values[k]) for k in range(2)]))


def proximal_cost(u: VectorField, ubar: VectorField) -> float:
    """½‖u − ū‖² + ½‖curl(u − ū)‖²。"""
    diff = u - ubar
    curl_diff = curl_vector(diff)
    return 0.5 * inner_product(diff, diff) + 0.5 * inner_product(curl_diff, curl_diff)


def proximal_gradient(u: VectorField, ubar: VectorField) -> VectorField:
    """proximal_cost の勾配 (u − ū) + curl*(curl(u − ū))。"""
    diff = u - ubar
    return diff + curl_adjoint(curl_vector(diff))


# 軟化した制御で近似問題を最小化する。
def optimize_regularized(
    u0: VectorField,
    ubar: VectorField,
    spec: CostSpec,
    bounds: AdmissibleSet,
    params: FluidParams,
    cfg: SolverConfig,
    eps: MollifierSpec,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    *,
    kappa_bar: Optional[float] = None,
) -> OptimizationTrace:
    """I(u) = J(u; y(ϱu)) + 近接項。随伴の寄与は ϱp として勾配に入る。"""
    grid = u0.grid
    reach = eps.epsilon
    logger.info("軟化子 epsilon=%.4g (h=%.4g): 境界から epsilon 以内では curl との可換性が劣化します。", reach, grid.h)

    def evaluate(u: VectorField, psi0: Optional[ScalarField]) -> _Evaluation:
        smoothed = mollify(u, eps)
        state = _converged_state(smoothed, params, cfg, psi0)
        adjoint = _adjoint(state, state.y - spec.target, params, cfg, opt_cfg.adjoint_mode)
        mismatch = state.y - spec.target
        cost = 0.5 * inner_product(mismatch, mismatch) + 0.5 * spec.lam * inner_product(u, u) + proximal_cost(u, ubar)
        gradient = mollify(adjoint.p, eps) + spec.lam * u + proximal_gradient(u, ubar)
        return _Evaluation(cost=cost, gradient=gradient, state=state, adjoint=adjoint)

    return _projected_gradient(evaluate, u0, bounds, params, opt_cfg, kappa_bar, f"optimize_regularized(eps={reach:.4g})")
