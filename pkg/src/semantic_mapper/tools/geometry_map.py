"""
姿勢ベースの点群登録とスパースボクセル占有マップ

各フレームの点群を外部から与えられるオドメトリで世界座標へ変換し、
ボクセル化して占有マップへ蓄積する。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, NamedTuple, Optional, Set

import numpy as np

from .exceptions import ParameterError, SequencingError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_VOXEL_SIZE = 0.2
ORTHONORMAL_TOLERANCE = 1e-6
# int64 へ安全に変換できるセル番号の上限
MAX_VOXEL_INDEX = 2.0**62


class VoxelKey(NamedTuple):
    """整数ボクセル座標"""
    ix: int
    iy: int
    iz: int


@dataclass(frozen=True)
class Pose:
    """フレームを世界座標へ登録する剛体変換"""
    rotation: np.ndarray
    translation: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rotation.shape != (3, 3):
            raise ValidationError(f"回転行列の形状が不正です: {rotation.shape}")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValidationError("姿勢に有限でない値が含まれています")
        if self.frame_index < 0:
            raise ValidationError(f"frame_index は0以上が必要です: {self.frame_index}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        self.validate()

    def validate(self) -> None:
        """回転行列の正規直交性と行列式を検証する"""
        deviation = float(np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))))
        if deviation > ORTHONORMAL_TOLERANCE:
            raise ValidationError(
                f"回転行列が正規直交ではありません: |R^T R - I|_max = {deviation:.3e}"
            )
        det = float(np.linalg.det(self.rotation))
        if det <= 0:
            raise ValidationError(f"回転行列の行列式が正ではありません: det = {det:.6f}")

    @classmethod
    def identity(cls, frame_index: int = 0) -> "Pose":
        return cls(np.eye(3), np.zeros(3), frame_index)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, frame_index: int = 0) -> "Pose":
        """3x4 または 4x4 の [R|t] 行列から姿勢を作成する"""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape not in ((3, 4), (4, 4)):
            raise ValidationError(f"姿勢行列の形状が不正です: {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3], frame_index)

    def as_matrix(self) -> np.ndarray:
        """4x4 同次変換行列 T = [R t; 0 1]"""
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def inverse(self) -> "Pose":
        rotation_t = self.rotation.T
        return Pose(rotation_t, -rotation_t @ self.translation, self.frame_index)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other（other を先に適用）"""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.frame_index,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) の点群に p' = R p + t を適用する"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PointCloud:
    """1フレーム分の点群（センサ座標または世界座標）"""
    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    frame_index: int = 0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValidationError("点群に有限でない座標が含まれています")
        object.__setattr__(self, "points", points)
        if self.intensity is not None:
            intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if intensity.shape[0] != points.shape[0]:
                raise ValidationError(
                    f"反射強度の数が点数と一致しません: {intensity.shape[0]} != {points.shape[0]}"
                )
            if not np.all(np.isfinite(intensity)):
                raise ValidationError("反射強度に有限でない値が含まれています")
            object.__setattr__(self, "intensity", intensity)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass
class OccupancyMap:
    """スパースなボクセル占有マップ（キー → 初観測フレーム）"""
    voxel_size: float = DEFAULT_VOXEL_SIZE
    cells: Dict[VoxelKey, int] = field(default_factory=dict)
    last_frame: Optional[int] = None

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, key) -> bool:
        return key in self.cells

    def __iter__(self) -> Iterator[VoxelKey]:
        return iter(self.cells)

    def keys(self) -> Set[VoxelKey]:
        return set(self.cells)


def _check_voxel_size(voxel_size: float) -> None:
    if not voxel_size > 0:
        raise ParameterError(f"voxel_size は正の値が必要です: {voxel_size}")


def transform_cloud(pose: Pose, cloud: PointCloud) -> PointCloud:
    """
    点群を姿勢で世界座標へ変換する

    Args:
        pose: フレームの姿勢
        cloud: センサ座標の点群

    Returns:
        各点に p' = R p + t を適用した点群（順序と反射強度は保持）
    """
    pose.validate()
    return PointCloud(pose.apply(cloud.points), cloud.intensity, cloud.frame_index)


def voxelize_points(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """各点のボクセルキー floor(p / s) を (N, 3) の整数配列で返す"""
    _check_voxel_size(voxel_size)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cells = np.floor(points / voxel_size)
    if cells.size and not np.all(np.abs(cells) < MAX_VOXEL_INDEX):
        raise ValidationError(
            f"ボクセル番号が整数の範囲を超えます (voxel_size={voxel_size}, 最大 |p|={np.abs(points).max():.3g})"
        )
    return cells.astype(np.int64)


def voxelize(cloud: PointCloud, voxel_size: float) -> Set[VoxelKey]:
    """
    点群をボクセルキーの集合へ変換する

    セルは半開区間 [i*s, (i+1)*s) で、負の座標も floor で扱う。
    """
    keys = voxelize_points(cloud.points, voxel_size)
    if keys.shape[0] == 0:
        return set()
    unique = np.unique(keys, axis=0)
    return {VoxelKey(*row) for row in unique.tolist()}


def voxel_center(key: VoxelKey, voxel_size: float) -> np.ndarray:
    """ボクセル中心 (key + 0.5) * s"""
    _check_voxel_size(voxel_size)
    return (np.asarray(key, dtype=np.float64) + 0.5) * voxel_size


def voxel_centers(keys: np.ndarray, voxel_size: float) -> np.ndarray:
    _check_voxel_size(voxel_size)
    keys = np.asarray(keys, dtype=np.float64).reshape(-1, 3)
    return (keys + 0.5) * voxel_size


def sorted_keys(keys: Iterable[VoxelKey]) -> np.ndarray:
    """キー集合を辞書順に並べた (N, 3) 整数配列"""
    ordered = sorted(keys)
    if not ordered:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(ordered, dtype=np.int64)


def integrate_frame(
    occupancy: OccupancyMap,
    keys: Iterable[VoxelKey],
    frame_index: int,
) -> OccupancyMap:
    """
    フレームのボクセル集合を占有マップへ蓄積する（集合の和）

    Args:
        occupancy: 蓄積先のマップ（単一ライタ前提でその場更新する）
        keys: このフレームのボクセルキー
        frame_index: フレーム番号（単調非減少）

    Returns:
        更新されたマップ
    """
    if occupancy.last_frame is not None and frame_index < occupancy.last_frame:
        raise SequencingError(
            f"フレーム順序が不正です: frame {frame_index} < 直前の最大 {occupancy.last_frame}"
        )
    added = 0
    for key in keys:
        if key not in occupancy.cells:
            occupancy.cells[VoxelKey(*key)] = frame_index
            added += 1
    occupancy.last_frame = frame_index
    logger.debug("frame %d: %d 個の新規ボクセル（合計 %d）", frame_index, added, len(occupancy))
    return occupancy


def merge_maps(first: OccupancyMap, second: OccupancyMap) -> OccupancyMap:
    """独立に構築した部分マップを統合する（初観測フレームは小さい方を残す）"""
    if first.voxel_size != second.voxel_size:
        raise ParameterError(
            f"ボクセルサイズが一致しません: {first.voxel_size} != {second.voxel_size}"
        )
    merged = OccupancyMap(first.voxel_size, dict(first.cells))
    for key, frame in second.cells.items():
        current = merged.cells.get(key)
        if current is None or frame < current:
            merged.cells[key] = frame
    frames = [f for f in (first.last_frame, second.last_frame) if f is not None]
    merged.last_frame = max(frames) if frames else None
    return merged
