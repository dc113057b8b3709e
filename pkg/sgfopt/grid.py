from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
import logging
from typing import Literal, Union

import numpy as np
from scipy import sparse


logger = logging.getLogger(__name__)

MIN_NODES = 9


@dataclass(frozen=True)
class Grid:
    """単位正方形 [0,1]² 上の一様格子。x₁ を配列の axis 0、x₂ を axis 1 に割り当てる。"""

    nx: int
    ny: int

    @property
    def h(self) -> float:
        return 1.0 / (self.nx - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def n_interior(self) -> int:
        return (self.nx - 2) * (self.ny - 2)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x1 = np.linspace(0.0, 1.0, self.nx)
        x2 = np.linspace(0.0, 1.0, self.ny)
        return tuple(np.meshgrid(x1, x2, indexing="ij"))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :] = True
        mask[-1, :] = True
        mask[:, 0] = True
        mask[:, -1] = True
        return mask

    @cached_property
    def interior_index(self) -> np.ndarray:
        """内部節点の (行優先) 通し番号。"""
        return np.flatnonzero(~self.boundary_mask.ravel())

    @cached_property
    def weights(self) -> np.ndarray:
        """台形則の節点重み。総和は 1。"""
        w1 = np.ones(self.nx)
        w1[0] = w1[-1] = 0.5
        w2 = np.ones(self.ny)
        w2[0] = w2[-1] = 0.5
        return np.outer(w1, w2) * self.h**2

    @cached_property
    def vector_weights(self) -> np.ndarray:
        flat = self.weights.ravel()
        return np.concatenate([flat, flat])

    # ---- 組み立て用の疎行列 (全格子ベクトルは行優先で平坦化する) ----

    @cached_property
    def restrict(self) -> sparse.csr_matrix:
        """全格子 → 内部節点の抽出行列。転置が零拡張になる。"""
        n_int = self.n_interior
        return sparse.csr_matrix(
            (np.ones(n_int), (np.arange(n_int), self.interior_index)),
            shape=(n_int, self.size),
        )

    @cached_property
    def d1(self) -> sparse.csr_matrix:
        return sparse.kron(_gradient_matrix_1d(self.nx, self.h), sparse.identity(self.ny), format="csr")

    @cached_property
    def d2(self) -> sparse.csr_matrix:
        return sparse.kron(sparse.identity(self.nx), _gradient_matrix_1d(self.ny, self.h), format="csr")

    @cached_property
    def lap(self) -> sparse.csr_matrix:
        """5点ラプラシアン。境界行はゼロ。"""
        t1 = _second_difference_1d(self.nx, self.h)
        t2 = _second_difference_1d(self.ny, self.h)
        full = sparse.kron(t1, sparse.identity(self.ny)) + sparse.kron(sparse.identity(self.nx), t2)
        keep = sparse.diags((~self.boundary_mask).ravel().astype(float))
        return (keep @ full).tocsr()

    @cached_property
    def lap_clamped(self) -> sparse.csr_matrix:
        """内部の流れ関数 → 全格子の Δψ。境界値はゴースト消去 (∂ψ/∂n = 0) による 2ψ_内側/h²。"""
        n = self.nx
        position = np.full(self.size, -1)
        position[self.interior_index] = np.arange(self.n_interior)
        idx = np.arange(self.size).reshape(self.shape)
        inner = np.arange(1, n - 1)
        wall_rows = np.concatenate([idx[0, inner], idx[-1, inner], idx[inner, 0], idx[inner, -1]])
        neighbor = np.concatenate([idx[1, inner], idx[-2, inner], idx[inner, 1], idx[inner, -2]])
        wall = sparse.csr_matrix(
            (np.full(wall_rows.size, 2.0 / self.h**2), (wall_rows, position[neighbor])),
            shape=(self.size, self.n_interior),
        )
        return (self.lap @ self.restrict.T + wall).tocsr()

    @cached_property
    def biharmonic(self) -> sparse.csr_matrix:
        """クランプ境界の重調和作用素 (内部 × 内部)。"""
        return (self.restrict @ self.lap @ self.lap_clamped).tocsr()

    @cached_property
    def stream_to_velocity(self) -> sparse.csr_matrix:
        """内部の流れ関数 → 速度 (2 成分を縦に積んだ全格子ベクトル)。"""
        prolong = self.restrict.T
        return sparse.vstack([self.d2 @ prolong, -(self.d1 @ prolong)], format="csr")

    @cached_property
    def curl_matrix(self) -> sparse.csr_matrix:
        """ベクトル場 → スカラー curl = ∂₁v₂ − ∂₂v₁。"""
        return sparse.hstack([-self.d2, self.d1], format="csr")


# 一次元の中心差分行列 (端点は二次の片側差分) を作る。
def _gradient_matrix_1d(n: int, h: float) -> sparse.csr_matrix:
    """np.gradient(edge_order=2) と同じ係数を持つ行列を返す。"""
    matrix = sparse.diags([-1.0, 1.0], [-1, 1], shape=(n, n)).tolil()
    matrix[0, 0:3] = [-3.0, 4.0, -1.0]
    matrix[n - 1, n - 3 : n] = [1.0, -4.0, 3.0]
    return (matrix / (2.0 * h)).tocsr()


def _second_difference_1d(n: int, h: float) -> sparse.csr_matrix:
    matrix = sparse.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n, n)).tolil()
    matrix[0, :] = 0.0
    matrix[n - 1, :] = 0.0
    return (matrix / h**2).tocsr()


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        array = np.array(self.values, dtype=float)
        if array.shape != self.grid.shape:
            raise ValueError(f"スカラー場の形状 {array.shape} が格子 {self.grid.shape} と一致しません。")
        array.setflags(write=False)
        object.__setattr__(self, "values", array)

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_flat(cls, grid: Grid, flat: np.ndarray) -> "ScalarField":
        return cls(grid, np.asarray(flat).reshape(grid.shape))

    @classmethod
    def from_interior(cls, grid: Grid, interior: np.ndarray) -> "ScalarField":
        """内部節点の値から境界ゼロのスカラー場を作る。"""
        return cls.from_flat(grid, grid.restrict.T @ interior)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @property
    def interior(self) -> np.ndarray:
        return self.flat[self.grid.interior_index]

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, factor: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * factor)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VectorField:
    """2 成分のベクトル場。values の形状は (2, nx, ny)。"""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        array = np.array(self.values, dtype=float)
        if array.shape != (2, *self.grid.shape):
            raise ValueError(f"ベクトル場の形状 {array.shape} が格子 {self.grid.shape} と一致しません。")
        array.setflags(write=False)
        object.__setattr__(self, "values", array)

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros((2, *grid.shape)))

    @classmethod
    def from_flat(cls, grid: Grid, flat: np.ndarray) -> "VectorField":
        return cls(grid, np.asarray(flat).reshape((2, *grid.shape)))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.grid, self.values + other.values)

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.grid, self.values - other.values)

    def __neg__(self) -> "VectorField":
        return VectorField(self.grid, -self.values)

    def __mul__(self, factor: float) -> "VectorField":
        return VectorField(self.grid, self.values * factor)

    __rmul__ = __mul__


Field = Union[ScalarField, VectorField]


@dataclass(frozen=True)
class FluidParams:
    nu: float
    alpha: float

    def __post_init__(self) -> None:
        if not self.nu > 0:
            raise ValueError(f"nu は正の値を指定してください (nu={self.nu})。")
        if not self.alpha >= 0:
            raise ValueError(f"alpha は 0 以上の値を指定してください (alpha={self.alpha})。")


@dataclass(frozen=True)
class FieldNorms:
    l2: float
    h1_semi: float
    l4: float
    linf: float


# 格子サイズを検証して Grid を作る。
def make_grid(nx: int, ny: int) -> Grid:
    """正方セルかつ最小節点数を満たす格子を返す。"""
    if nx < MIN_NODES or ny < MIN_NODES:
        raise ValueError(f"格子が粗すぎます: ({nx}, {ny})。各軸 {MIN_NODES} 点以上を指定してください。")
    if nx != ny:
        raise ValueError(f"正方セルのみ対応しています: nx={nx}, ny={ny}")
    if nx % 2 == 0:
        logger.debug("節点数 %d は偶数です (奇数を推奨)。", nx)
    return Grid(int(nx), int(ny))


def _check_same_grid(*fields: Field) -> Grid:
    grid = fields[0].grid
    for field in fields[1:]:
        if field.grid != grid:
            raise ValueError("異なる格子上の場は組み合わせられません。")
    return grid


def _gradient(values: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    d1, d2 = np.gradient(values, h, edge_order=2)
    return d1, d2


# 5点ステンシルでラプラシアンを評価する。
def laplacian(s: ScalarField, closure: Literal["zero", "clamped"] = "zero") -> ScalarField:
    """内部は5点差分。境界行は closure に従う (clamped は ψ=0, ∂ψ/∂n=0 のゴースト消去)。"""
    grid = s.grid
    h2 = grid.h**2
    v = s.values
    out = np.zeros_like(v)
    out[1:-1, 1:-1] = (v[2:, 1:-1] + v[:-2, 1:-1] + v[1:-1, 2:] + v[1:-1, :-2] - 4.0 * v[1:-1, 1:-1]) / h2
    if closure == "clamped":
        out[0, 1:-1] = 2.0 * v[1, 1:-1] / h2
        out[-1, 1:-1] = 2.0 * v[-2, 1:-1] / h2
        out[1:-1, 0] = 2.0 * v[1:-1, 1] / h2
        out[1:-1, -1] = 2.0 * v[1:-1, -2] / h2
    elif closure != "zero":
        raise ValueError(f"未対応の境界閉包です: {closure}")
    return ScalarField(grid, out)


def sigma_apply(s: ScalarField, alpha: float, closure: Literal["zero", "clamped"] = "zero") -> ScalarField:
    """σ(s) = s − αΔs。"""
    return s - alpha * laplacian(s, closure)


def sigma_apply_vector(v: VectorField, alpha: float) -> VectorField:
    grid = v.grid
    components = [sigma_apply(ScalarField(grid, v.values[k]), alpha).values for k in range(2)]
    return VectorField(grid, np.stack(components))


# 流れ関数から速度場を復元する。
def velocity_from_stream(psi: ScalarField) -> VectorField:
    """y = (∂₂ψ, −∂₁ψ)。中心差分なので離散発散は恒等的にゼロ。"""
    d1, d2 = _gradient(psi.values, psi.grid.h)
    return VectorField(psi.grid, np.stack([d2, -d1]))


def curl_vector(v: VectorField) -> ScalarField:
    h = v.grid.h
    d1_v2, _ = _gradient(v.values[1], h)
    _, d2_v1 = _gradient(v.values[0], h)
    return ScalarField(v.grid, d1_v2 - d2_v1)


def curl_scalar(s: ScalarField) -> VectorField:
    d1, d2 = _gradient(s.values, s.grid.h)
    return VectorField(s.grid, np.stack([d2, -d1]))


def divergence(v: VectorField) -> ScalarField:
    h = v.grid.h
    d1_v1, _ = _gradient(v.values[0], h)
    _, d2_v2 = _gradient(v.values[1], h)
    return ScalarField(v.grid, d1_v1 + d2_v2)


def cross_scalar(y: VectorField, p: VectorField) -> ScalarField:
    """(y × p)_z = y₁p₂ − y₂p₁。"""
    _check_same_grid(y, p)
    return ScalarField(y.grid, y.values[0] * p.values[1] - y.values[1] * p.values[0])


# 重み付き内積 (台形則) を計算する。
def inner_product(a: Field, b: Field) -> float:
    """スカラー場同士・ベクトル場同士の L² 内積を返す。"""
    grid = _check_same_grid(a, b)
    return float(np.sum(grid.weights * a.values * b.values))


# 三重線形形式 b(φ, z, y) = (φ·∇z, y) を求積する。
def trilinear_b(phi: VectorField, z: VectorField, y: VectorField) -> float:
    grid = _check_same_grid(phi, z, y)
    total = np.zeros(grid.shape)
    for i in range(2):
        dz1, dz2 = _gradient(z.values[i], grid.h)
        total += (phi.values[0] * dz1 + phi.values[1] * dz2) * y.values[i]
    return float(np.sum(grid.weights * total))


def upwind_differences(y: VectorField, s: ScalarField) -> tuple[np.ndarray, np.ndarray]:
    """風上側の片側差分 (境界節点ではゼロ)。y 成分が 0 以上なら後退差分を選ぶ。"""
    grid = _check_same_grid(y, s)
    h = grid.h
    v = s.values
    g1 = np.zeros(grid.shape)
    g2 = np.zeros(grid.shape)
    back1 = (v[1:-1, 1:-1] - v[:-2, 1:-1]) / h
    fwd1 = (v[2:, 1:-1] - v[1:-1, 1:-1]) / h
    back2 = (v[1:-1, 1:-1] - v[1:-1, :-2]) / h
    fwd2 = (v[1:-1, 2:] - v[1:-1, 1:-1]) / h
    g1[1:-1, 1:-1] = np.where(y.values[0, 1:-1, 1:-1] >= 0.0, back1, fwd1)
    g2[1:-1, 1:-1] = np.where(y.values[1, 1:-1, 1:-1] >= 0.0, back2, fwd2)
    return g1, g2


# 一次風上差分で y·∇s を評価する。
def advect(y: VectorField, s: ScalarField) -> ScalarField:
    """内部節点のみ評価し、境界 (y=0 で流入なし) はゼロ。"""
    g1, g2 = upwind_differences(y, s)
    return ScalarField(s.grid, y.values[0] * g1 + y.values[1] * g2)


def advection_matrix(grid: Grid, y_values: np.ndarray) -> sparse.csr_matrix:
    """速度を固定した風上移流 s ↦ y·∇s の行列 (全格子 × 全格子、境界行はゼロ)。"""
    n2 = grid.ny
    h = grid.h
    idx = np.arange(grid.size).reshape(grid.shape)
    center = idx[1:-1, 1:-1].ravel()
    y1 = y_values[0, 1:-1, 1:-1].ravel()
    y2 = y_values[1, 1:-1, 1:-1].ravel()
    up1 = np.where(y1 >= 0.0, y1, 0.0) / h
    dn1 = np.where(y1 >= 0.0, 0.0, y1) / h
    up2 = np.where(y2 >= 0.0, y2, 0.0) / h
    dn2 = np.where(y2 >= 0.0, 0.0, y2) / h
    rows = np.concatenate([center] * 5)
    cols = np.concatenate([center, center - n2, center + n2, center - 1, center + 1])
    vals = np.concatenate([up1 - dn1 + up2 - dn2, -up1, dn1, -up2, dn2])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(grid.size, grid.size))


# 場のノルム一式を求積する。
def norms(field: Field) -> FieldNorms:
    """L², H¹ 半ノルム (中心差分勾配), L⁴, L∞ を返す。"""
    grid = field.grid
    w = grid.weights
    components = [field.values] if isinstance(field, ScalarField) else [field.values[0], field.values[1]]
    magnitude2 = sum(c**2 for c in components)
    grad2 = np.zeros(grid.shape)
    for c in components:
        d1, d2 = _gradient(c, grid.h)
        grad2 += d1**2 + d2**2
    return FieldNorms(
        l2=float(np.sqrt(np.sum(w * magnitude2))),
        h1_semi=float(np.sqrt(np.sum(w * grad2))),
        l4=float(np.sum(w * magnitude2**2) ** 0.25),
        linf=float(np.sqrt(np.max(magnitude2))),
    )


def curl_adjoint(s: ScalarField) -> VectorField:
    """重み付き L² における curl の随伴 (スカラー → ベクトル)。"""
    grid = s.grid
    flat = grid.curl_matrix.T @ (grid.weights.ravel() * s.flat)
    return VectorField.from_flat(grid, flat / grid.vector_weights)


def hcurl_norm(u: VectorField) -> float:
    """制御空間 H(curl) のノルム (‖u‖² + ‖curl u‖²)^{1/2}。"""
    return float(np.sqrt(norms(u).l2**2 + norms(curl_vector(u)).l2**2))


def v2_seminorm(y: VectorField, alpha: float) -> float:
    """|y|_{V₂} = ‖curl σ(y)‖₂。"""
    return norms(curl_vector(sigma_apply_vector(y, alpha))).l2
