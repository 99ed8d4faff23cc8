import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.semantic_mapper.tools.geometry_map import Pose
from src.semantic_mapper.tools.labels import Label
from src.semantic_mapper.tools.semantic_fusion import CameraModel
from src.semantic_mapper.tools.synthetic_oracle import (
    Primitive,
    SceneSpec,
    SensorSpec,
    build_street_scene,
    straight_trajectory,
)


@pytest.fixture
def temp_dir():
    """一時ディレクトリを作成し、テスト後に削除する"""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture
def simple_camera():
    """100x100 画素、焦点距離100、主点 (50, 50) のカメラ（Lidar の x 軸が光軸）"""
    return CameraModel.from_intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture
def small_sensor():
    """既定と同じ画角で解像度を落とした合成センサ"""
    return SensorSpec(fx=100.0, fy=100.0, cx=100.0, cy=30.0, width=200, height=60, max_range=15.0)


@pytest.fixture
def static_scene():
    """車両のない市街地シーン（3フレーム）"""
    return build_street_scene(n_frames=3, parked_car=False, moving_car=False, seed=1)


@pytest.fixture
def moving_scene():
    """駐車車両と走行車両のある市街地シーン（6フレーム）"""
    return build_street_scene(n_frames=6, parked_car=True, moving_car=True, seed=2)


@pytest.fixture
def confusion_scene():
    """道の両側に建物の壁と生垣が向かい合うシーン（常に全体が視野内）"""
    primitives = [
        Primitive(Label.Building, (8.0, 4.0, 0.0), (16.0, 4.4, 4.0)),
        Primitive(Label.Vegetation, (8.0, -4.4, 0.0), (16.0, -4.0, 2.4)),
    ]
    trajectory = straight_trajectory(6, step=(0.5, 0.0, 0.0))
    return SceneSpec(primitives, [], trajectory, seed=7)


@pytest.fixture
def tiny_scene():
    """道路と壁だけの小さなシーン（2フレーム）"""
    primitives = [
        Primitive(Label.Road, (2.0, -2.0, -0.2), (10.0, 2.0, 0.0)),
        Primitive(Label.Building, (4.0, 2.4, 0.0), (9.0, 2.8, 2.0)),
    ]
    return SceneSpec(primitives, [], straight_trajectory(2), seed=3)


@pytest.fixture
def demo_scene_file():
    """同梱のデモシーンファイル"""
    return Path(__file__).parent.parent / "src" / "structure" / "demo_scene.txt"


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, frame_index: int = 0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-10, 10, size=3), frame_index)
