"""
カメラ投影とベイズ更新によるボクセルへのラベル融合

ボクセル中心をカメラへ投影し、画素のラベルスコアを観測としてボクセルの
ラベル分布を再帰的に更新する。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Optional, Set, Tuple

import numpy as np
import pandas as pd

from .exceptions import DataError, DegenerateEvidenceError, ParameterError, ValidationError
from .geometry_map import (
    DEFAULT_VOXEL_SIZE,
    OccupancyMap,
    Pose,
    VoxelKey,
    sorted_keys,
    voxel_centers,
)
from .labels import NUM_LABELS, SEMANTIC_LABELS, Label

logger = logging.getLogger(__name__)

DEFAULT_PROB_FLOOR = 1e-3
DEFAULT_MIN_DEPTH = 1e-3
MIN_EVIDENCE = 1e-30
PIXEL_SUM_TOLERANCE = 1e-6

# Lidar (x前方, y左, z上) → カメラ (x右, y下, z前方)
KITTI_AXIS_CHANGE = np.array(
    [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]
)


def uniform_distribution() -> np.ndarray:
    return np.full(NUM_LABELS, 1.0 / NUM_LABELS)


@dataclass(frozen=True)
class CameraModel:
    """Lidar座標の同次点を画像座標へ写す 3x4 射影モデル"""
    projection: np.ndarray
    width: int
    height: int
    min_depth: float = DEFAULT_MIN_DEPTH

    def __post_init__(self):
        projection = np.asarray(self.projection, dtype=np.float64)
        if projection.shape != (3, 4):
            raise ValidationError(f"射影行列の形状が不正です: {projection.shape}")
        if not np.all(np.isfinite(projection)):
            raise ValidationError("射影行列に有限でない値が含まれています")
        if np.linalg.matrix_rank(projection) < 3:
            raise ValidationError("射影行列が行フルランクではありません")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"画像サイズが不正です: {self.width}x{self.height}")
        object.__setattr__(self, "projection", projection)

    @classmethod
    def from_intrinsics(
        cls,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
        extrinsic: Optional[np.ndarray] = None,
        min_depth: float = DEFAULT_MIN_DEPTH,
    ) -> "CameraModel":
        """
        内部パラメータと外部パラメータから射影行列 K·[R|t] を組み立てる

        Args:
            fx, fy: 焦点距離（画素）
            cx, cy: 主点（画素）
            width, height: 画像サイズ
            extrinsic: Lidar→カメラの 3x4 または 4x4 行列。省略時はKITTIの軸変換のみ

        Returns:
            CameraModel
        """
        intrinsic = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        if extrinsic is None:
            extrinsic = np.hstack([KITTI_AXIS_CHANGE, np.zeros((3, 1))])
        extrinsic = np.asarray(extrinsic, dtype=np.float64)[:3, :4]
        return cls(intrinsic @ extrinsic, width, height, min_depth)

    def for_pose(self, pose: Pose) -> "CameraModel":
        """世界座標の点を直接射影するカメラ P·T⁻¹ を返す"""
        world_projection = self.projection @ pose.inverse().as_matrix()
        return CameraModel(world_projection, self.width, self.height, self.min_depth)


def project_with_depth(camera: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pixels, depth w, visible) を返す。融合と合成センサはこの同じ計算を使う"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    homogeneous = points @ camera.projection[:, :3].T + camera.projection[:, 3]
    depth = homogeneous[:, 2]
    in_front = depth > camera.min_depth
    safe_depth = np.where(in_front, depth, 1.0)
    pixels = homogeneous[:, :2] / safe_depth[:, None]
    visible = (
        in_front
        & (pixels[:, 0] >= 0)
        & (pixels[:, 0] < camera.width)
        & (pixels[:, 1] >= 0)
        & (pixels[:, 1] < camera.height)
    )
    return pixels, depth, visible


def project_points(camera: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    複数点を一括で投影する

    Returns:
        (pixels, visible): (N, 2) の画素座標と可視マスク。不可視点の座標は無意味
    """
    pixels, _, visible = project_with_depth(camera, points)
    return pixels, visible


def project_point(camera: CameraModel, point: np.ndarray) -> Optional[Tuple[float, float]]:
    """
    1点を画像へ投影する

    (u, v, w) = P·(x, y, z, 1) とし、w <= min_depth または画像外なら None。
    """
    pixels, visible = project_points(camera, np.asarray(point, dtype=np.float64).reshape(1, 3))
    if not visible[0]:
        return None
    return float(pixels[0, 0]), float(pixels[0, 1])


def _check_prob_floor(prob_floor: float) -> None:
    if not 0.0 <= prob_floor < 1.0 / NUM_LABELS:
        raise ParameterError(
            f"prob_floor は [0, {1.0 / NUM_LABELS}) の範囲が必要です: {prob_floor}"
        )


def apply_probability_floor(distributions: np.ndarray, prob_floor: float) -> np.ndarray:
    """
    各成分を prob_floor 以上に保ったまま総和1へ正規化する

    下限を下回る成分を下限に固定し、残りの質量を他の成分へ比例配分する。
    再配分で新たに下限を割った成分があれば固定して繰り返す。
    """
    distributions = np.atleast_2d(np.asarray(distributions, dtype=np.float64))
    if prob_floor <= 0:
        return distributions
    result = distributions.copy()
    clamped = np.zeros(result.shape, dtype=bool)
    for _ in range(NUM_LABELS):
        newly = ~clamped & (result < prob_floor)
        if not newly.any():
            break
        clamped |= newly
        free = np.where(clamped, 0.0, distributions)
        free_sum = free.sum(axis=1, keepdims=True)
        free_mass = 1.0 - prob_floor * clamped.sum(axis=1, keepdims=True)
        scale = np.where(free_sum > 0, free_mass / np.where(free_sum > 0, free_sum, 1.0), 0.0)
        result = np.where(clamped, prob_floor, free * scale)
    return result


def bayes_update_batch(
    priors: np.ndarray,
    observed: np.ndarray,
    prob_floor: float = DEFAULT_PROB_FLOOR,
) -> np.ndarray:
    """
    (N, 5) の事前分布と観測分布から事後分布をまとめて計算する

    Args:
        priors: 事前分布
        observed: 観測されたラベル分布
        prob_floor: 成分の下限。0 で下限処理を無効化

    Returns:
        正規化と下限処理を済ませた (N, 5) の事後分布
    """
    _check_prob_floor(prob_floor)
    priors = np.atleast_2d(np.asarray(priors, dtype=np.float64))
    observed = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    if priors.shape != observed.shape or priors.shape[1] != NUM_LABELS:
        raise ValidationError(f"分布の形状が不正です: {priors.shape}, {observed.shape}")
    product = priors * observed
    evidence = product.sum(axis=1, keepdims=True)
    if np.any(evidence < MIN_EVIDENCE):
        raise DegenerateEvidenceError(
            f"正規化定数が小さすぎます: Z = {float(evidence.min()):.3e}"
        )
    return apply_probability_floor(product / evidence, prob_floor)


def bayes_update(
    prior: np.ndarray,
    observed: np.ndarray,
    prob_floor: float = DEFAULT_PROB_FLOOR,
) -> np.ndarray:
    """posterior_i = prior_i · observed_i / Z、その後に下限処理"""
    return bayes_update_batch(
        np.asarray(prior, dtype=np.float64).reshape(1, -1),
        np.asarray(observed, dtype=np.float64).reshape(1, -1),
        prob_floor,
    )[0]


@dataclass(frozen=True)
class SegmentationFrame:
    """1枚のカメラ画像に対する W×H×5 のラベルスコア（scores[u, v]）"""
    scores: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        if scores.ndim != 3 or scores.shape[2] != NUM_LABELS:
            raise ValidationError(f"スコアの形状は (W, H, {NUM_LABELS}) が必要です: {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise DataError("スコアに有限でない値が含まれています")
        if np.any(scores < 0):
            raise DataError("負のスコアが含まれています")
        sums = scores.sum(axis=2)
        empty = sums <= 0
        if empty.any():
            logger.warning("frame %d: スコア総和が0の画素 %d 個を一様分布として扱います",
                           self.frame_index, int(empty.sum()))
            scores[empty] = 1.0 / NUM_LABELS
            sums = scores.sum(axis=2)
        off = np.abs(sums - 1.0) > PIXEL_SUM_TOLERANCE
        if off.any():
            scores[off] = scores[off] / sums[off][:, None]
        object.__setattr__(self, "scores", scores)

    @property
    def width(self) -> int:
        return int(self.scores.shape[0])

    @property
    def height(self) -> int:
        return int(self.scores.shape[1])

    @classmethod
    def uniform(cls, width: int, height: int, frame_index: int = 0) -> "SegmentationFrame":
        return cls(np.full((width, height, NUM_LABELS), 1.0 / NUM_LABELS), frame_index)


@dataclass
class VoxelCell:
    distribution: np.ndarray = field(default_factory=uniform_distribution)
    final_label: Label = Label.Unknown
    observation_count: int = 0


@dataclass
class SemanticVoxelMap:
    """ボクセルキー → (ラベル分布, 確定ラベル, 観測回数) のスパースマップ"""
    voxel_size: float = DEFAULT_VOXEL_SIZE
    cells: Dict[VoxelKey, VoxelCell] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, key) -> bool:
        return key in self.cells

    def __iter__(self) -> Iterator[VoxelKey]:
        return iter(self.cells)

    def keys(self) -> Set[VoxelKey]:
        return set(self.cells)

    @classmethod
    def from_occupancy(cls, occupancy: OccupancyMap) -> "SemanticVoxelMap":
        semantic = cls(occupancy.voxel_size)
        semantic.add_cells(occupancy.cells)
        return semantic

    def add_cells(self, keys: Iterable[VoxelKey]) -> int:
        """未登録のキーを一様事前分布で追加し、追加数を返す"""
        added = 0
        for key in keys:
            if key not in self.cells:
                self.cells[VoxelKey(*key)] = VoxelCell()
                added += 1
        return added

    def copy(self) -> "SemanticVoxelMap":
        return SemanticVoxelMap(
            self.voxel_size,
            {
                key: VoxelCell(cell.distribution.copy(), cell.final_label, cell.observation_count)
                for key, cell in self.cells.items()
            },
        )

    def remove(self, keys: Iterable[VoxelKey]) -> int:
        removed = 0
        for key in keys:
            if self.cells.pop(key, None) is not None:
                removed += 1
        return removed

    def label_counts(self) -> Dict[Label, int]:
        counts = {label: 0 for label in Label}
        for cell in self.cells.values():
            counts[cell.final_label] += 1
        return counts

    def keys_with_label(self, label: Label) -> Set[VoxelKey]:
        return {key for key, cell in self.cells.items() if cell.final_label == label}

    def to_frame(self) -> pd.DataFrame:
        """キー順に並べた DataFrame（ix, iy, iz, label, p0..p4, observation_count）"""
        columns = ["ix", "iy", "iz", "label"] + [f"p{i}" for i in range(NUM_LABELS)] + [
            "observation_count"
        ]
        rows = []
        for key in sorted(self.cells):
            cell = self.cells[key]
            rows.append(
                [key.ix, key.iy, key.iz, int(cell.final_label)]
                + cell.distribution.tolist()
                + [cell.observation_count]
            )
        return pd.DataFrame(rows, columns=columns)


def _argmax_labels(distributions: np.ndarray) -> np.ndarray:
    # np.argmax は最初の最大値を返すため、同点はラベル順（Road 優先）で決まる
    return np.argmax(distributions, axis=1)


def _nearest_per_pixel(pixel_ids: np.ndarray, depth: np.ndarray) -> np.ndarray:
    order = np.lexsort((depth, pixel_ids))
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = pixel_ids[order][1:] != pixel_ids[order][:-1]
    keep = np.zeros(pixel_ids.shape[0], dtype=bool)
    keep[order[first]] = True
    return keep


def fuse_frame(
    semantic_map: SemanticVoxelMap,
    camera: CameraModel,
    seg: SegmentationFrame,
    candidate_keys: Iterable[VoxelKey],
    prob_floor: float = DEFAULT_PROB_FLOOR,
    depth_buffer: bool = False,
) -> SemanticVoxelMap:
    """
    1フレーム分の観測を候補ボクセルへ融合する

    Args:
        semantic_map: 更新対象のマップ（その場で更新）
        camera: 世界座標の点を射影するカメラ（CameraModel.for_pose の結果）
        seg: このフレームのセグメンテーション
        candidate_keys: このフレームで統合されたボクセルキー
        prob_floor: 確率の下限
        depth_buffer: True なら同一画素に落ちる候補のうち最も手前のものだけ更新

    Returns:
        更新されたマップ
    """
    keys = sorted_keys(candidate_keys)
    if keys.shape[0] == 0:
        return semantic_map
    key_tuples = [VoxelKey(*row) for row in keys.tolist()]
    missing = [key for key in key_tuples if key not in semantic_map.cells]
    if missing:
        raise ValidationError(f"マップに存在しないボクセルが候補に含まれています: {missing[0]}")

    centers = voxel_centers(keys, semantic_map.voxel_size)
    pixels, depth, visible = project_with_depth(camera, centers)
    columns = np.floor(pixels[:, 0]).astype(np.int64)
    rows = np.floor(pixels[:, 1]).astype(np.int64)
    visible &= (columns >= 0) & (columns < seg.width) & (rows >= 0) & (rows < seg.height)
    index = np.flatnonzero(visible)
    if depth_buffer and index.size:
        pixel_ids = rows[index] * seg.width + columns[index]
        index = index[_nearest_per_pixel(pixel_ids, depth[index])]
    if index.size == 0:
        return semantic_map

    cells = [semantic_map.cells[key_tuples[i]] for i in index]
    priors = np.stack([cell.distribution for cell in cells])
    observed = seg.scores[columns[index], rows[index]]
    posteriors = bayes_update_batch(priors, observed, prob_floor)
    labels = _argmax_labels(posteriors)
    for cell, posterior, label in zip(cells, posteriors, labels):
        cell.distribution = posterior
        cell.observation_count += 1
        cell.final_label = Label(int(label))
    logger.debug("frame %d: %d / %d 個のボクセルを観測", seg.frame_index, index.size, len(key_tuples))
    return semantic_map


def observe_voxel(
    semantic_map: SemanticVoxelMap,
    key: VoxelKey,
    camera: CameraModel,
    seg: SegmentationFrame,
    prob_floor: float = DEFAULT_PROB_FLOOR,
) -> VoxelCell:
    """1ボクセルを投影して観測し、更新後のセルを返す（不可視なら変更なし）"""
    fuse_frame(semantic_map, camera, seg, [key], prob_floor)
    return semantic_map.cells[VoxelKey(*key)]


def finalize_labels(semantic_map: SemanticVoxelMap) -> SemanticVoxelMap:
    """
    各セルの確定ラベルを分布の argmax で決める

    未観測のセルは Unknown。入力マップは変更せず新しいマップを返す。
    """
    result = semantic_map.copy()
    if not result.cells:
        return result
    cells = list(result.cells.values())
    labels = _argmax_labels(np.stack([cell.distribution for cell in cells]))
    for cell, label in zip(cells, labels):
        cell.final_label = Label(int(label)) if cell.observation_count > 0 else Label.Unknown
    counts = result.label_counts()
    logger.info(
        "ラベル確定: %s",
        ", ".join(f"{label.name}={counts[label]}" for label in (*SEMANTIC_LABELS, Label.Unknown)),
    )
    return result
