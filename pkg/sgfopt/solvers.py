from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Literal, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from sgfopt.grid import (
    FluidParams,
    Grid,
    ScalarField,
    VectorField,
    advection_matrix,
    curl_vector,
    norms,
    upwind_differences,
    velocity_from_stream,
)


logger = logging.getLogger(__name__)

# 輸送分解のPicard反復は α が小さいと収縮が遅くなるため、この値未満では coupled を選ぶ。
TRANSPORT_MIN_ALPHA = 0.01
MIN_RELAXATION = 1.0 / 64.0


class ConvergenceError(RuntimeError):
    pass


class SingularSystemError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    picard_tol: float = 1e-10
    picard_max_iters: int = 200
    relaxation: float = 1.0
    pivot_tol: float = 1.0
    scheme: Literal["auto", "transport", "coupled"] = "auto"

    def __post_init__(self) -> None:
        if not self.picard_tol > 0:
            raise ValueError("picard_tol は正の値を指定してください。")
        if self.picard_max_iters < 1:
            raise ValueError("picard_max_iters は 1 以上を指定してください。")
        if not 0.0 < self.relaxation <= 1.0:
            raise ValueError("relaxation は 0 < θ ≤ 1 の範囲で指定してください。")
        if not 0.0 <= self.pivot_tol <= 1.0:
            raise ValueError("pivot_tol は 0 以上 1 以下を指定してください。")
        if self.scheme not in {"auto", "transport", "coupled"}:
            raise ValueError(f"未対応の scheme です: {self.scheme}")


@dataclass(frozen=True)
class PicardRecord:
    iteration: int
    residual: float
    increment: float
    step_norm: float


@dataclass(frozen=True, eq=False)
class StateSolution:
    y: VectorField
    psi: ScalarField
    omega: ScalarField
    iterations: int
    residual: float
    converged: bool
    params: FluidParams
    scheme: str
    history: tuple[PicardRecord, ...] = ()

    def diagnostics_rows(self) -> list[tuple[int, float, float]]:
        """診断CSV (iter,residual,increment) の行。"""
        return [(r.iteration, r.residual, r.increment) for r in self.history]


@dataclass(frozen=True, eq=False)
class LinearizedSolution:
    z: VectorField
    chi: ScalarField
    zeta: ScalarField
    w: VectorField


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    p: VectorField
    q: ScalarField
    mode: Literal["pde", "discrete-transpose"]
    f: VectorField


# 疎行列をLU分解し、特異な場合はドメイン例外に変換する。
def _factorize(matrix: sparse.spmatrix, cfg: SolverConfig, label: str) -> splinalg.SuperLU:
    """splu の分解オブジェクトを返す。"""
    try:
        return splinalg.splu(sparse.csc_matrix(matrix), diag_pivot_thresh=cfg.pivot_tol)
    except RuntimeError as exc:
        raise SingularSystemError(f"{label} の連立一次方程式が特異です: {exc}") from exc


def _omega_matrix(grid: Grid, alpha: float) -> sparse.csr_matrix:
    """内部の ψ → ω = −(I − αΔ)Δψ (全格子)。"""
    identity = sparse.identity(grid.size, format="csr")
    return (-(identity - alpha * grid.lap) @ grid.lap_clamped).tocsr()


def _wall_lift(grid: Grid, params: FluidParams, control_flat: np.ndarray) -> np.ndarray:
    """境界上の輸送量に加わる (α/ν) curl u の寄与。"""
    if params.alpha == 0.0:
        return np.zeros(grid.size)
    boundary = grid.boundary_mask.ravel()
    return np.where(boundary, (params.alpha / params.nu) * (grid.curl_matrix @ control_flat), 0.0)


def _velocity_values(grid: Grid, psi_interior: np.ndarray) -> np.ndarray:
    return (grid.stream_to_velocity @ psi_interior).reshape((2, *grid.shape))


def _weighted_interior_norm(grid: Grid, vector: np.ndarray) -> float:
    return float(np.sqrt(np.sum(vector**2)) * grid.h)


def _residual_parts(
    grid: Grid, psi_interior: np.ndarray, u: VectorField, params: FluidParams
) -> tuple[np.ndarray, np.ndarray]:
    """残差ベクトルと、各項の絶対値を足した成分ごとの大きさ。"""
    u_flat = u.flat
    omega = _omega_matrix(grid, params.alpha) @ psi_interior + _wall_lift(grid, params, u_flat)
    adv = advection_matrix(grid, _velocity_values(grid, psi_interior))
    viscous = params.nu * (grid.biharmonic @ psi_interior)
    convective = grid.restrict @ (adv @ omega)
    source = grid.restrict @ (grid.curl_matrix @ u_flat)
    magnitude = (
        params.nu * (abs(grid.biharmonic) @ np.abs(psi_interior))
        + abs(grid.restrict) @ (abs(adv) @ np.abs(omega))
        + abs(grid.restrict) @ (abs(grid.curl_matrix) @ np.abs(u_flat))
    )
    return viscous + convective - source, magnitude


def _residual_vector(grid: Grid, psi_interior: np.ndarray, u: VectorField, params: FluidParams) -> np.ndarray:
    return _residual_parts(grid, psi_interior, u, params)[0]


def _relative_residual(grid: Grid, psi_interior: np.ndarray, u: VectorField, params: FluidParams) -> float:
    # 丸め誤差の床は演算子の大きさに比例するため、成分ごとの大きさで割る
    residual, magnitude = _residual_parts(grid, psi_interior, u, params)
    scale = _weighted_interior_norm(grid, magnitude)
    value = _weighted_interior_norm(grid, residual)
    return value / scale if scale > 0.0 else value


# 流れ関数形式の離散運動量残差を評価する。
def state_residual(psi: ScalarField, u: VectorField, params: FluidParams) -> ScalarField:
    """νΔ²ψ + y·∇ω − curl u を内部節点で評価し、境界ゼロの場として返す。"""
    grid = psi.grid
    return ScalarField.from_interior(grid, _residual_vector(grid, psi.interior, u, params))


def _resolve_scheme(cfg: SolverConfig, params: FluidParams) -> str:
    if cfg.scheme != "auto":
        if cfg.scheme == "transport" and params.alpha == 0.0:
            raise ValueError("transport スキームは alpha > 0 でのみ使用できます。")
        return cfg.scheme
    return "transport" if params.alpha >= TRANSPORT_MIN_ALPHA else "coupled"


# Picard 反復で定常状態方程式を解く。
def solve_state(
    u: VectorField,
    params: FluidParams,
    cfg: SolverConfig = SolverConfig(),
    *,
    psi0: Optional[ScalarField] = None,
) -> StateSolution:
    """流れ関数形式の Picard 反復。収束しなかった場合も診断付きで解を返す。

    transport: 凍結速度で輸送方程式を解いて ω を更新し、(I−αΔ)Δψ = −ω から ψ を回復する。
    coupled: 凍結速度の Oseen 型方程式を流れ関数で直接解く (α = 0 を含む)。
    residual は残差を各項の絶対値の和で割った相対値で、丸めの床は格子幅に依らない。
    """
    grid = u.grid
    scheme = _resolve_scheme(cfg, params)
    nu, alpha = params.nu, params.alpha
    u_flat = u.flat
    curl_u = grid.curl_matrix @ u_flat
    lift = _wall_lift(grid, params, u_flat)
    omega_mat = _omega_matrix(grid, alpha)
    forcing = grid.restrict @ curl_u
    identity = sparse.identity(grid.size, format="csr")

    recovery = None
    if scheme == "transport":
        recovery = _factorize(grid.restrict @ omega_mat, cfg, "回復方程式")

    psi = np.zeros(grid.n_interior) if psi0 is None else psi0.interior.copy()
    theta = cfg.relaxation
    history: list[PicardRecord] = []
    residual = np.inf
    converged = False

    for iteration in range(1, cfg.picard_max_iters + 1):
        adv = advection_matrix(grid, _velocity_values(grid, psi))
        if scheme == "transport":
            rhs = (alpha / nu) * curl_u - grid.lap_clamped @ psi
            transport = _factorize(identity + (alpha / nu) * adv, cfg, "輸送方程式")
            omega = transport.solve(rhs)
            candidate = recovery.solve(grid.restrict @ omega)
        else:
            system = nu * grid.biharmonic + grid.restrict @ adv @ omega_mat
            rhs = forcing - grid.restrict @ (adv @ lift)
            candidate = _factorize(system, cfg, "Oseen 方程式").solve(rhs)

        psi_next = psi + theta * (candidate - psi)
        step_norm = norms(velocity_from_stream(ScalarField.from_interior(grid, psi_next - psi))).h1_semi
        current_norm = norms(velocity_from_stream(ScalarField.from_interior(grid, psi_next))).h1_semi
        increment = step_norm / current_norm if current_norm > 0.0 else step_norm
        new_residual = _relative_residual(grid, psi_next, u, params)
        history.append(PicardRecord(iteration, new_residual, increment, step_norm))
        logger.debug("Picard %d: residual=%.3e increment=%.3e theta=%.4g", iteration, new_residual, increment, theta)

        if new_residual > residual and theta > MIN_RELAXATION:
            theta = max(theta * 0.5, MIN_RELAXATION)
            logger.warning("残差が増加したため緩和係数を %.4g に下げます (iter=%d)。", theta, iteration)
        psi = psi_next
        residual = new_residual
        if max(residual, increment) <= cfg.picard_tol:
            converged = True
            break

    if converged:
        logger.debug("状態方程式が収束しました: scheme=%s iterations=%d residual=%.3e", scheme, iteration, residual)
    else:
        logger.warning("状態方程式が %d 回で収束しませんでした (residual=%.3e)。", cfg.picard_max_iters, residual)

    psi_field = ScalarField.from_interior(grid, psi)
    return StateSolution(
        y=velocity_from_stream(psi_field),
        psi=psi_field,
        omega=ScalarField.from_flat(grid, omega_mat @ psi + lift),
        iterations=iteration,
        residual=float(residual),
        converged=converged,
        params=params,
        scheme=scheme,
        history=tuple(history),
    )


def solver_contraction(solution: StateSolution, noise: float = 1e-11) -> list[float]:
    """反復の収縮率 |y^{k+1}−y^k| / |y^k−y^{k−1}| (k ≥ 2)。

    直前の増分が最大増分の noise 倍を下回ったら丸め誤差の領域とみなして打ち切る。
    """
    steps = [record.step_norm for record in solution.history]
    if not steps:
        return []
    floor = noise * max(steps)
    factors = []
    for previous, current in zip(steps, steps[1:]):
        if previous <= floor:
            break
        factors.append(current / previous)
    return factors


def _control_coupling(grid: Grid, state: StateSolution, adv: sparse.spmatrix) -> sparse.csr_matrix:
    """線形化方程式の右辺作用素 w ↦ R curl w − (α/ν) R Adv(y) M_Γ curl w。"""
    params = state.params
    coupling = grid.restrict @ grid.curl_matrix
    if params.alpha > 0.0:
        boundary = sparse.diags(grid.boundary_mask.ravel().astype(float))
        coupling = coupling - (params.alpha / params.nu) * (grid.restrict @ adv @ boundary @ grid.curl_matrix)
    return sparse.csr_matrix(coupling)


# 状態まわりで線形化した作用素 (離散残差のヤコビアン) を組み立てる。
def _linearized_system(state: StateSolution) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    grid = state.psi.grid
    params = state.params
    y_values = _velocity_values(grid, state.psi.interior)
    adv = advection_matrix(grid, y_values)
    g1, g2 = upwind_differences(VectorField(grid, y_values), state.omega)
    velocity_sensitivity = sparse.hstack([sparse.diags(g1.ravel()), sparse.diags(g2.ravel())])
    matrix = (
        params.nu * grid.biharmonic
        + grid.restrict @ adv @ _omega_matrix(grid, params.alpha)
        + grid.restrict @ velocity_sensitivity @ grid.stream_to_velocity
    )
    return sparse.csr_matrix(matrix), _control_coupling(grid, state, adv)


def _require_converged(state: StateSolution) -> None:
    if not state.converged:
        raise ConvergenceError("状態解が収束していないため線形化できません。")


# 状態まわりの線形化方程式を解く。
def solve_linearized(
    state: StateSolution,
    w: VectorField,
    params: FluidParams,
    cfg: SolverConfig = SolverConfig(),
) -> LinearizedSolution:
    """νΔ²χ + y·∇ω(χ) + z·∇ω = curl w を流れ関数 χ について一括で解く。"""
    _require_converged(state)
    _check_params(state, params)
    grid = w.grid
    matrix, coupling = _linearized_system(state)
    chi = _factorize(matrix, cfg, "線形化方程式").solve(coupling @ w.flat)
    lift = _wall_lift(grid, params, w.flat)
    chi_field = ScalarField.from_interior(grid, chi)
    return LinearizedSolution(
        z=velocity_from_stream(chi_field),
        chi=chi_field,
        zeta=ScalarField.from_flat(grid, _omega_matrix(grid, params.alpha) @ chi + lift),
        w=w,
    )


# 線形化行列の転置で離散随伴方程式を解く。
def solve_adjoint_discrete(
    state: StateSolution,
    f: VectorField,
    params: FluidParams,
    cfg: SolverConfig = SolverConfig(),
) -> AdjointSolution:
    """双対性 (f, z(w)) = (w, p(f)) が線形ソルバ精度で成り立つ随伴解を返す。"""
    _require_converged(state)
    _check_params(state, params)
    grid = f.grid
    matrix, coupling = _linearized_system(state)
    load = grid.stream_to_velocity.T @ (grid.vector_weights * f.flat)
    multiplier = _factorize(matrix.T, cfg, "離散随伴方程式").solve(load)
    p = VectorField.from_flat(grid, (coupling.T @ multiplier) / grid.vector_weights)
    q = ScalarField.from_interior(grid, multiplier / grid.h**2)
    return AdjointSolution(p=p, q=q, mode="discrete-transpose", f=f)


def adjoint_pde_matrix(state: StateSolution) -> sparse.csr_matrix:
    """随伴方程式 νΔ²q − p·∇ω − Δ[(I−αΔ)(y×p)] を離散化した行列 (p = curl⊥q)。"""
    grid = state.psi.grid
    params = state.params
    d1_omega, d2_omega = np.gradient(state.omega.values, grid.h, edge_order=2)
    y_values = state.y.values
    vorticity_gradient = sparse.hstack([sparse.diags(d1_omega.ravel()), sparse.diags(d2_omega.ravel())])
    cross = sparse.hstack([sparse.diags(-y_values[1].ravel()), sparse.diags(y_values[0].ravel())])
    identity = sparse.identity(grid.size, format="csr")
    sigma_laplacian = (identity - params.alpha * grid.lap) @ grid.lap_clamped
    matrix = (
        params.nu * grid.biharmonic
        - grid.restrict @ vorticity_gradient @ grid.stream_to_velocity
        - grid.restrict @ sigma_laplacian @ grid.restrict @ cross @ grid.stream_to_velocity
    )
    return sparse.csr_matrix(matrix)


# 連続の随伴方程式を離散化して解く。
def solve_adjoint_pde(
    state: StateSolution,
    f: VectorField,
    params: FluidParams,
    cfg: SolverConfig = SolverConfig(),
) -> AdjointSolution:
    _require_converged(state)
    _check_params(state, params)
    grid = f.grid
    rhs = grid.restrict @ (grid.curl_matrix @ f.flat)
    q = _factorize(adjoint_pde_matrix(state), cfg, "随伴方程式").solve(rhs)
    q_field = ScalarField.from_interior(grid, q)
    return AdjointSolution(p=velocity_from_stream(q_field), q=q_field, mode="pde", f=f)


def adjoint_limit_residual(state: StateSolution, adjoint: AdjointSolution) -> float:
    """α = 0 の随伴流れ関数方程式の相対残差。"""
    grid = state.psi.grid
    if state.params.alpha != 0.0:
        raise ValueError("adjoint_limit_residual は alpha = 0 の状態にのみ適用できます。")
    rhs = grid.restrict @ (grid.curl_matrix @ adjoint.f.flat)
    residual = adjoint_pde_matrix(state) @ adjoint.q.interior - rhs
    scale = _weighted_interior_norm(grid, rhs)
    value = _weighted_interior_norm(grid, residual)
    return value / scale if scale > 0.0 else value


def _check_params(state: StateSolution, params: FluidParams) -> None:
    if state.params != params:
        raise ValueError("状態解と異なる流体パラメータが指定されました。")


def smallness_margin(u: VectorField, params: FluidParams, kappa_bar: float) -> float:
    """一意性条件の余裕 ν² − κ̄(‖u‖₂ + α‖curl u‖₂)。"""
    load = norms(u).l2 + params.alpha * norms(curl_vector(u)).l2
    return params.nu**2 - kappa_bar * load
