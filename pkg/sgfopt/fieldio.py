from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from sgfopt.grid import Field, Grid, ScalarField, VectorField, make_grid


logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class ArtifactWriteError(RuntimeError):
    pass


def _format_value(value: object) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % float(value)
    return str(value)


# 場をテキスト形式で書き出す。
def write_field(field: Field, path: Path) -> Path:
    """1行目にヘッダ "nx ny h"、以降は行優先で 1 行 1 節点 (ベクトル場は 2 列) を全桁で書く。"""
    grid = field.grid
    if isinstance(field, VectorField):
        rows = np.column_stack([field.values[0].ravel(), field.values[1].ravel()])
    else:
        rows = field.values.reshape(-1, 1)
    header = f"{grid.nx} {grid.ny} {FLOAT_FORMAT % grid.h}"
    try:
        np.savetxt(path, rows, fmt=FLOAT_FORMAT, header=header, comments="")
    except OSError as exc:
        raise ArtifactWriteError(f"場の書き出しに失敗しました: {path}") from exc
    logger.debug("場を書き出しました: %s", path)
    return path


# テキスト形式の場を読み込む。
def read_field(path: Path) -> Field:
    """列数から成分数を判定し、ScalarField か VectorField を返す。"""
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        header = handle.readline().split()
    if len(header) != 3:
        raise ValueError(f"場ファイルのヘッダが不正です: {path}")
    grid = make_grid(int(header[0]), int(header[1]))
    data = np.loadtxt(path, skiprows=1, ndmin=2)
    logger.debug("場を読み込みました: %s (%d 列)", path, data.shape[1])
    if data.shape == (grid.size, 1):
        return ScalarField(grid, data[:, 0].reshape(grid.shape))
    if data.shape == (grid.size, 2):
        return VectorField(grid, np.stack([data[:, k].reshape(grid.shape) for k in range(2)]))
    raise ValueError(f"場ファイルの形状 {data.shape} がヘッダ ({grid.nx}, {grid.ny}) と一致しません: {path}")


def read_vector_field(path: Path, grid: Grid) -> VectorField:
    field = read_field(path)
    if not isinstance(field, VectorField):
        raise ValueError(f"ベクトル場を期待しましたがスカラー場でした: {path}")
    if field.grid != grid:
        raise ValueError(f"場ファイルの格子 {field.grid.shape} が設定 {grid.shape} と一致しません: {path}")
    return field


# 表形式の結果を CSV に書き出す。
def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    try:
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format_value(value) for value in row])
    except OSError as exc:
        raise ArtifactWriteError(f"CSV の書き出しに失敗しました: {path}") from exc
    return path


def write_summary(path: Path, values: Mapping[str, object]) -> Path:
    """key=value 形式のサマリを書き出す。"""
    lines = [f"{key}={_format_value(value)}" for key, value in values.items()]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactWriteError(f"サマリの書き出しに失敗しました: {path}") from exc
    return path


def read_summary(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


