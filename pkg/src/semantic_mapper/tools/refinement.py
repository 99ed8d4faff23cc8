"""
確定済みセマンティックマップの3D後処理

1. 建物/植生の混同を2Dカウントグリッドで列ごとに補正する
2. 道路支持フィルタと DBSCAN により移動車両の軌跡を除去する
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Set, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.ndimage import binary_dilation
from sklearn.cluster import DBSCAN

from .exceptions import ParameterError
from .geometry_map import VoxelKey, sorted_keys, voxel_centers
from .labels import Label
from .semantic_fusion import SemanticVoxelMap

logger = logging.getLogger(__name__)

Column = Tuple[int, int]

# 距離がちょうど eps のボクセル中心を近傍として扱うための相対的な拡幅
EPS_WIDENING = 1e-9


class RefineParams(BaseModel):
    """3D後処理のパラメータ"""
    model_config = ConfigDict(frozen=True)

    eta_d: int = Field(1500, gt=0, description="静止クラスタとみなすボクセル数の上限（この値未満）")
    eta_l: float = Field(6.0, gt=0, description="静止クラスタとみなす水平長さの上限 [m]（この値未満）")
    dbscan_eps: float = Field(0.6, gt=0, description="DBSCAN の近傍半径 [m]")
    dbscan_min_pts: int = Field(10, ge=1, description="DBSCAN のコア点に必要な近傍数（自身を含む）")
    footprint_dilation: int = Field(1, ge=0, description="道路フットプリントの膨張セル数（チェビシェフ半径）")
    column_prior: Tuple[float, float] = Field(
        (0.5, 0.5), description="列ラベル推定の事前確率 (Building, Vegetation)"
    )
    n_jobs: Optional[int] = Field(None, description="DBSCAN 近傍探索の並列数")

    @field_validator("column_prior")
    @classmethod
    def _check_prior(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if min(value) < 0 or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"column_prior は非負で総和1が必要です: {value}")
        return value


class ClusterStatus(str, Enum):
    STATIC = "Static"
    MOVING = "Moving"


@dataclass
class CountGrid:
    """列 (ix, iy) ごとの、あるラベルのボクセル数"""
    label: Label
    cells: Dict[Column, int] = field(default_factory=dict)

    def count(self, column: Column) -> int:
        return self.cells.get(column, 0)

    def total(self) -> int:
        return sum(self.cells.values())


@dataclass
class ColumnLabelGrid:
    """列ごとの推定ラベル。None は判定不能（同点）"""
    cells: Dict[Column, Optional[Label]] = field(default_factory=dict)

    def decided(self) -> Dict[Column, Label]:
        return {column: label for column, label in self.cells.items() if label is not None}


@dataclass
class Cluster:
    """DBSCAN で得られた車両ボクセルのクラスタ"""
    members: List[VoxelKey]
    horizontal_extent: float
    status: Optional[ClusterStatus] = None

    @property
    def cardinality(self) -> int:
        return len(self.members)


class VehicleClusters(NamedTuple):
    clusters: List[Cluster]
    noise: Set[VoxelKey]
    unsupported: Set[VoxelKey]


def build_count_grid(semantic_map: SemanticVoxelMap, label: Label) -> CountGrid:
    """
    指定ラベルのボクセル数を列ごとに数える

    Args:
        semantic_map: 確定済みマップ
        label: 数えるラベル

    Returns:
        CountGrid
    """
    keys = semantic_map.keys_with_label(label)
    if not keys:
        return CountGrid(label)
    frame = pd.DataFrame(sorted(keys), columns=["ix", "iy", "iz"])
    counts = frame.groupby(["ix", "iy"]).size()
    return CountGrid(label, {(int(ix), int(iy)): int(n) for (ix, iy), n in counts.items()})


def infer_column_labels(
    building: CountGrid,
    vegetation: CountGrid,
    prior: Tuple[float, float] = (0.5, 0.5),
) -> ColumnLabelGrid:
    """
    建物と植生のカウントから列ごとのラベルを推定する

    p(l) ∝ prior(l) · count_l / (count_B + count_V)。共通の分母は比較に影響しないので
    prior(l) · count_l を直接比較し、完全な同点は判定不能とする。
    """
    prior_b, prior_v = prior
    if min(prior) < 0 or abs(prior_b + prior_v - 1.0) > 1e-9:
        raise ParameterError(f"事前確率は非負で総和1が必要です: {prior}")
    grid = ColumnLabelGrid()
    for column in sorted(set(building.cells) | set(vegetation.cells)):
        score_b = prior_b * building.count(column)
        score_v = prior_v * vegetation.count(column)
        if score_b > score_v:
            grid.cells[column] = Label.Building
        elif score_v > score_b:
            grid.cells[column] = Label.Vegetation
        else:
            grid.cells[column] = None
    return grid


def apply_column_labels(semantic_map: SemanticVoxelMap, grid: ColumnLabelGrid) -> SemanticVoxelMap:
    """建物/植生のボクセルを列の推定ラベルで上書きする（分布はそのまま）"""
    result = semantic_map.copy()
    decided = grid.decided()
    changed = 0
    for key, cell in result.cells.items():
        if cell.final_label not in (Label.Building, Label.Vegetation):
            continue
        column_label = decided.get((key.ix, key.iy))
        if column_label is not None and column_label != cell.final_label:
            cell.final_label = column_label
            changed += 1
    logger.info("列ラベル補正: %d 個のボクセルを再ラベル", changed)
    return result


def correct_columns(
    semantic_map: SemanticVoxelMap,
    prior: Tuple[float, float] = (0.5, 0.5),
) -> SemanticVoxelMap:
    grid = infer_column_labels(
        build_count_grid(semantic_map, Label.Building),
        build_count_grid(semantic_map, Label.Vegetation),
        prior,
    )
    return apply_column_labels(semantic_map, grid)


def road_footprint(semantic_map: SemanticVoxelMap, dilation: int = 0) -> Set[Column]:
    """
    道路ボクセルを含む列の集合（チェビシェフ半径 dilation で膨張）
    """
    if dilation < 0:
        raise ParameterError(f"dilation は0以上が必要です: {dilation}")
    columns = {(key.ix, key.iy) for key in semantic_map.keys_with_label(Label.Road)}
    if dilation == 0 or not columns:
        return columns
    coords = np.asarray(sorted(columns), dtype=np.int64)
    origin = coords.min(axis=0) - dilation
    shape = coords.max(axis=0) - origin + dilation + 1
    grid = np.zeros(tuple(shape), dtype=bool)
    grid[coords[:, 0] - origin[0], coords[:, 1] - origin[1]] = True
    structure = np.ones((2 * dilation + 1, 2 * dilation + 1), dtype=bool)
    dilated = binary_dilation(grid, structure=structure)
    xs, ys = np.nonzero(dilated)
    return {(int(x + origin[0]), int(y + origin[1])) for x, y in zip(xs, ys)}


def road_support_filter(semantic_map: SemanticVoxelMap, footprint: Set[Column]) -> SemanticVoxelMap:
    """道路フットプリント外の列にある車両ボクセルを削除する"""
    result = semantic_map.copy()
    unsupported = [
        key for key in result.keys_with_label(Label.Vehicle) if (key.ix, key.iy) not in footprint
    ]
    result.remove(unsupported)
    logger.info("道路支持フィルタ: 車両ボクセル %d 個を削除", len(unsupported))
    return result


def dbscan(
    keys: Set[VoxelKey],
    voxel_size: float,
    eps: float,
    min_pts: int,
    n_jobs: Optional[int] = None,
) -> Tuple[List[Cluster], Set[VoxelKey]]:
    """
    ボクセル中心に対する3次元 DBSCAN

    近傍は自身を含み距離 eps 以下。境界点はキーの辞書順で最初に見つかった
    コア点のクラスタに属する。

    Args:
        keys: クラスタリング対象のボクセル
        voxel_size: ボクセルサイズ [m]
        eps: 近傍半径 [m]
        min_pts: コア点に必要な近傍数

    Returns:
        (クラスタのリスト, ノイズボクセルの集合)
    """
    if not eps > 0:
        raise ParameterError(f"eps は正の値が必要です: {eps}")
    if min_pts < 1:
        raise ParameterError(f"min_pts は1以上が必要です: {min_pts}")
    ordered = sorted_keys(keys)
    if ordered.shape[0] == 0:
        return [], set()
    # 中心間距離はキー差 × voxel_size なので整数格子上で判定する
    radius = eps / voxel_size * (1.0 + EPS_WIDENING)
    model = DBSCAN(eps=radius, min_samples=min_pts, n_jobs=n_jobs)
    assignment = model.fit_predict(ordered.astype(np.float64))

    members = [VoxelKey(*row) for row in ordered.tolist()]
    clusters = []
    for cluster_id in range(int(assignment.max()) + 1):
        index = np.flatnonzero(assignment == cluster_id)
        centers = voxel_centers(ordered[index], voxel_size)
        extent = np.ptp(centers[:, :2], axis=0)
        clusters.append(Cluster([members[i] for i in index], float(extent.max())))
    noise = {members[i] for i in np.flatnonzero(assignment < 0)}
    return clusters, noise


def classify_cluster(cluster: Cluster, params: RefineParams) -> ClusterStatus:
    """(D < eta_d) かつ (L < eta_l) なら静止、それ以外は移動"""
    if cluster.cardinality < params.eta_d and cluster.horizontal_extent < params.eta_l:
        return ClusterStatus.STATIC
    return ClusterStatus.MOVING


def find_vehicle_clusters(semantic_map: SemanticVoxelMap, params: RefineParams) -> VehicleClusters:
    """道路支持フィルタの後に車両ボクセルをクラスタリングし、各クラスタを分類する"""
    footprint = road_footprint(semantic_map, params.footprint_dilation)
    vehicles = semantic_map.keys_with_label(Label.Vehicle)
    unsupported = {key for key in vehicles if (key.ix, key.iy) not in footprint}
    clusters, noise = dbscan(
        vehicles - unsupported,
        semantic_map.voxel_size,
        params.dbscan_eps,
        params.dbscan_min_pts,
        params.n_jobs,
    )
    for cluster in clusters:
        cluster.status = classify_cluster(cluster, params)
        logger.debug(
            "cluster D=%d L=%.2f -> %s",
            cluster.cardinality,
            cluster.horizontal_extent,
            cluster.status.value,
        )
    return VehicleClusters(clusters, noise, unsupported)


def remove_moving(semantic_map: SemanticVoxelMap, params: RefineParams) -> SemanticVoxelMap:
    """
    移動車両の軌跡を除去する

    道路支持のない車両ボクセル、移動クラスタ、DBSCAN ノイズを削除する。
    静止クラスタと車両以外のボクセルは残る。
    """
    found = find_vehicle_clusters(semantic_map, params)
    doomed = set(found.unsupported) | found.noise
    moving = [c for c in found.clusters if c.status == ClusterStatus.MOVING]
    for cluster in moving:
        doomed.update(cluster.members)
    result = semantic_map.copy()
    result.remove(doomed)
    logger.info(
        "移動物体除去: クラスタ %d 個（移動 %d）、ノイズ %d、道路外 %d、削除合計 %d",
        len(found.clusters),
        len(moving),
        len(found.noise),
        len(found.unsupported),
        len(doomed),
    )
    return result


def refine(semantic_map: SemanticVoxelMap, params: Optional[RefineParams] = None) -> SemanticVoxelMap:
    """列ラベル補正の後に移動車両除去を行う。入力マップは変更しない"""
    params = params or RefineParams()
    corrected = correct_columns(semantic_map, params.column_prior)
    return remove_moving(corrected, params)
