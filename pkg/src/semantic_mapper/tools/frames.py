"""
パイプラインへ入力するフレームの供給元
"""

from typing import List, NamedTuple, Protocol, Sequence, runtime_checkable

from .exceptions import ConfigurationError
from .geometry_map import PointCloud, Pose
from .semantic_fusion import CameraModel, SegmentationFrame


class FrameData(NamedTuple):
    """1フレーム分の入力（姿勢・センサ座標の点群・セグメンテーション）"""
    pose: Pose
    cloud: PointCloud
    segmentation: SegmentationFrame


@runtime_checkable
class FrameSource(Protocol):
    """インデックス順にフレームを返す入力源"""

    camera: CameraModel

    def __len__(self) -> int:
        ...

    def get_frame(self, index: int) -> FrameData:
        ...


class InMemoryFrameSource:
    """メモリ上のフレーム列をそのまま返す入力源"""

    def __init__(self, camera: CameraModel, frames: Sequence[FrameData]):
        self.camera = camera
        self._frames: List[FrameData] = list(frames)

    def __len__(self) -> int:
        return len(self._frames)

    def get_frame(self, index: int) -> FrameData:
        if not 0 <= index < len(self._frames):
            raise ConfigurationError(f"フレーム番号が範囲外です: {index} (フレーム数 {len(self._frames)})")
        return self._frames[index]
