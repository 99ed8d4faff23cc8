"""
正解付きの合成市街地シーンとセンサフレームの生成

軸平行な箱でシーンを表し、箱の表面をサンプリングして Lidar 点群を、
ボクセル中心を投影してセグメンテーションを生成する。混同ノイズは
フレーム番号ごとに独立した乱数列から作るため、並列生成しても結果は同じ。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic import ValidationError as PydanticValidationError
from scipy.spatial.transform import Rotation

from .evaluation import MetricsReport, evaluate
from .exceptions import FormatError, SemanticMapError, ValidationError
from .frames import FrameData
from .geometry_map import DEFAULT_VOXEL_SIZE, PointCloud, Pose, VoxelKey, voxel_centers, voxelize_points
from .labels import NUM_LABELS, Label, parse_label
from .refinement import RefineParams
from .semantic_fusion import (
    DEFAULT_PROB_FLOOR,
    CameraModel,
    SegmentationFrame,
    SemanticVoxelMap,
    VoxelCell,
    project_with_depth,
)

logger = logging.getLogger(__name__)

FACE_INSET = 1e-4
OCCLUSION_MARGIN = 1e-3
SENSOR_HEIGHT = 1.7


@dataclass(frozen=True)
class Primitive:
    """ラベル付きの軸平行な箱 [minimum, maximum)"""
    label: Label
    minimum: Tuple[float, float, float]
    maximum: Tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.minimum)
        hi = tuple(float(v) for v in self.maximum)
        if len(lo) != 3 or len(hi) != 3:
            raise ValidationError("箱の角は3次元で指定してください")
        if not all(h > l for l, h in zip(lo, hi)):
            raise ValidationError(f"箱の体積が正ではありません: {lo} - {hi}")
        if self.label == Label.Unknown:
            raise ValidationError("Unknown ラベルの箱は作れません")
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    def translated(self, offset: np.ndarray) -> "Primitive":
        offset = np.asarray(offset, dtype=np.float64)
        return Primitive(
            self.label,
            tuple(np.asarray(self.minimum) + offset),
            tuple(np.asarray(self.maximum) + offset),
        )


@dataclass(frozen=True)
class MovingPrimitive:
    """フレームごとに velocity だけ平行移動する箱"""
    box: Primitive
    velocity: Tuple[float, float, float]

    def at_frame(self, frame_index: int) -> Primitive:
        return self.box.translated(np.asarray(self.velocity, dtype=np.float64) * frame_index)


@dataclass
class SceneSpec:
    primitives: List[Primitive] = field(default_factory=list)
    moving_objects: List[MovingPrimitive] = field(default_factory=list)
    trajectory: List[Pose] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not self.trajectory:
            raise ValidationError("軌跡には1フレーム以上が必要です")
        if self.seed < 0:
            raise ValidationError(f"seed は0以上が必要です: {self.seed}")

    def boxes_at(self, frame_index: int) -> List[Primitive]:
        """静止物体の後に、フレーム位置へ移動した移動物体を並べたリスト"""
        return list(self.primitives) + [moving.at_frame(frame_index) for moving in self.moving_objects]


class NoiseSpec(BaseModel):
    """セグメンテーションの混同ノイズ"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    confusion_rate: float = Field(0.0, ge=0.0, le=1.0, description="ペア内でラベルを入れ替える確率")
    confusion_pairs: List[Tuple[Label, Label]] = Field(
        default_factory=lambda: [(Label.Building, Label.Vegetation)],
        description="混同するラベルのペア",
    )
    softmax_sharpness: float = Field(4.0, gt=0.0, description="softmax の鋭さ（inf で one-hot）")

    @field_validator("confusion_pairs")
    @classmethod
    def _check_pairs(cls, pairs: List[Tuple[Label, Label]]) -> List[Tuple[Label, Label]]:
        seen: Set[Label] = set()
        for first, second in pairs:
            if first == second or Label.Unknown in (first, second):
                raise ValueError(f"不正な混同ペアです: {first.name}:{second.name}")
            if first in seen or second in seen:
                raise ValueError("同じラベルが複数の混同ペアに含まれています")
            seen.update((first, second))
        return pairs

    def partner_table(self) -> np.ndarray:
        """ラベル値 → 入れ替え先（無ければ -1）"""
        table = np.full(NUM_LABELS, -1, dtype=np.int64)
        for first, second in self.confusion_pairs:
            table[int(first)] = int(second)
            table[int(second)] = int(first)
        return table


class SensorSpec(BaseModel):
    """合成センサ（Lidar とカメラは同じ位置、カメラは前方を向く）"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    fx: float = Field(400.0, gt=0)
    fy: float = Field(400.0, gt=0)
    cx: float = 400.0
    cy: float = 120.0
    width: int = Field(800, gt=0)
    height: int = Field(240, gt=0)
    max_range: float = Field(25.0, gt=0, description="Lidar の最大距離 [m]")
    sample_spacing: Optional[float] = Field(None, gt=0, description="表面サンプル間隔 [m]（省略時は voxel_size/2）")
    voxel_size: float = Field(DEFAULT_VOXEL_SIZE, gt=0)
    visibility: Literal["splat", "raycast"] = "splat"

    @property
    def spacing(self) -> float:
        return self.sample_spacing if self.sample_spacing is not None else self.voxel_size / 2

    def camera(self) -> CameraModel:
        return CameraModel.from_intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class SurfaceSamples(NamedTuple):
    """フィルタ済みの表面サンプル（world は点群を姿勢で戻した座標）"""
    world: np.ndarray
    sensor: np.ndarray
    keys: np.ndarray
    primitive: np.ndarray


class SimulatedFrame(NamedTuple):
    pose: Pose
    cloud: PointCloud
    segmentation: SegmentationFrame


class SceneFile(NamedTuple):
    scene: SceneSpec
    noise: NoiseSpec
    sensor: SensorSpec


# ----------------------------------------------------------------------
# 幾何

def _inside(points: np.ndarray, box: Primitive) -> np.ndarray:
    lo = np.asarray(box.minimum)
    hi = np.asarray(box.maximum)
    return np.all((points >= lo) & (points < hi), axis=1)


def _lattice(lo: float, hi: float, spacing: float) -> np.ndarray:
    count = int(np.ceil((hi - lo) / spacing - 0.5))
    if count <= 0:
        return np.array([(lo + hi) / 2])
    return lo + (np.arange(count) + 0.5) * spacing


def box_surface_samples(box: Primitive, spacing: float) -> np.ndarray:
    """6面を半ステップずらした格子でサンプリングする（面からわずかに内側）"""
    lo = np.asarray(box.minimum)
    hi = np.asarray(box.maximum)
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        first = _lattice(lo[others[0]], hi[others[0]], spacing)
        second = _lattice(lo[others[1]], hi[others[1]], spacing)
        grid_a, grid_b = np.meshgrid(first, second, indexing="ij")
        for level in (lo[axis] + FACE_INSET, hi[axis] - FACE_INSET):
            face = np.empty((grid_a.size, 3))
            face[:, axis] = level
            face[:, others[0]] = grid_a.ravel()
            face[:, others[1]] = grid_b.ravel()
            faces.append(face)
    return np.vstack(faces)


def _ray_box_entry(origin: np.ndarray, directions: np.ndarray, box: Primitive) -> np.ndarray:
    """各レイ origin + t·d が箱に入る t（当たらなければ inf、始点が箱内なら 0）"""
    lo = np.asarray(box.minimum)
    hi = np.asarray(box.maximum)
    t_near = np.full(directions.shape[0], -np.inf)
    t_far = np.full(directions.shape[0], np.inf)
    for axis in range(3):
        d = directions[:, axis]
        parallel = d == 0
        outside = (origin[axis] < lo[axis]) | (origin[axis] > hi[axis])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[axis] - origin[axis]) / d
            t2 = (hi[axis] - origin[axis]) / d
        t_near = np.where(parallel, np.where(outside, np.inf, t_near), np.maximum(t_near, np.minimum(t1, t2)))
        t_far = np.where(parallel, np.where(outside, -np.inf, t_far), np.minimum(t_far, np.maximum(t1, t2)))
    hit = (t_far >= np.maximum(t_near, 0.0)) & np.isfinite(t_far)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def _label_at(points: np.ndarray, boxes: Sequence[Primitive]) -> np.ndarray:
    labels = np.full(points.shape[0], int(Label.Unknown), dtype=np.int64)
    for box in boxes:
        labels[_inside(points, box)] = int(box.label)
    return labels


def frame_surface_samples(scene: SceneSpec, frame_index: int, sensor: SensorSpec) -> SurfaceSamples:
    """
    フレームの Lidar リターンとなる表面サンプルを求める

    残すのは次を全て満たすサンプル: 属する箱の内部にボクセル中心がある、
    センサから max_range 以内、ボクセル中心がカメラ画像内に投影される。
    raycast モードでは他の箱に遮られるサンプルも除く。
    """
    if not 0 <= frame_index < len(scene.trajectory):
        raise ValidationError(f"frame_index が軌跡の範囲外です: {frame_index}")
    pose = scene.trajectory[frame_index]
    boxes = scene.boxes_at(frame_index)
    inverse = pose.inverse()
    world_camera = sensor.camera().for_pose(pose)

    chunks = []
    for index, box in enumerate(boxes):
        raw = box_surface_samples(box, sensor.spacing)
        raw = raw[np.linalg.norm(raw - pose.translation, axis=1) <= sensor.max_range]
        if raw.shape[0] == 0:
            continue
        # 点群ファイルは float32 なので、その精度に丸めた座標から登録し直す
        local = inverse.apply(raw).astype(np.float32).astype(np.float64)
        registered = pose.apply(local)
        keys = voxelize_points(registered, sensor.voxel_size)
        centers = voxel_centers(keys, sensor.voxel_size)
        _, _, visible = project_with_depth(world_camera, centers)
        keep = _inside(centers, box) & visible
        if sensor.visibility == "raycast" and keep.any():
            keep &= ~_occluded(pose.translation, registered, boxes, keep)
        chunks.append(
            (registered[keep], local[keep], keys[keep], np.full(int(keep.sum()), index, dtype=np.int64))
        )
    if not chunks:
        empty = np.zeros((0, 3))
        return SurfaceSamples(empty, empty, np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))
    return SurfaceSamples(*(np.concatenate(parts) for parts in zip(*chunks)))


def _occluded(origin: np.ndarray, points: np.ndarray, boxes: Sequence[Primitive], mask: np.ndarray) -> np.ndarray:
    occluded = np.zeros(points.shape[0], dtype=bool)
    index = np.flatnonzero(mask)
    directions = points[index] - origin
    lengths = np.linalg.norm(directions, axis=1)
    limit = 1.0 - OCCLUSION_MARGIN / np.maximum(lengths, OCCLUSION_MARGIN)
    for box in boxes:
        occluded[index] |= _ray_box_entry(origin, directions, box) < limit
    return occluded


def moving_trace_keys(scene: SceneSpec, sensor: SensorSpec) -> Set[VoxelKey]:
    """移動物体のサンプルから生じる全ボクセル（マップ上の軌跡）"""
    first_moving = len(scene.primitives)
    trace: Set[VoxelKey] = set()
    for frame_index in range(len(scene.trajectory)):
        samples = frame_surface_samples(scene, frame_index, sensor)
        moving = samples.keys[samples.primitive >= first_moving]
        trace.update(VoxelKey(*row) for row in np.unique(moving, axis=0).tolist())
    return trace


# ----------------------------------------------------------------------
# 描画

def _render_splat(
    samples: SurfaceSamples, boxes: Sequence[Primitive], camera: CameraModel, voxel_size: float
) -> np.ndarray:
    labels_image = np.full((camera.width, camera.height), int(Label.Unknown), dtype=np.int64)
    if samples.keys.shape[0] == 0:
        return labels_image
    keys = np.unique(samples.keys, axis=0)
    centers = voxel_centers(keys, voxel_size)
    labels = _label_at(centers, boxes)
    pixels, depth, visible = project_with_depth(camera, centers)
    index = np.flatnonzero(visible)
    columns = np.floor(pixels[index, 0]).astype(np.int64)
    rows = np.floor(pixels[index, 1]).astype(np.int64)
    pixel_ids = rows * camera.width + columns
    order = np.lexsort((depth[index], pixel_ids))
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = pixel_ids[order][1:] != pixel_ids[order][:-1]
    nearest = order[first]
    labels_image[columns[nearest], rows[nearest]] = labels[index[nearest]]
    return labels_image


def _render_raycast(boxes: Sequence[Primitive], camera: CameraModel) -> np.ndarray:
    matrix = camera.projection[:, :3]
    center = -np.linalg.solve(matrix, camera.projection[:, 3])
    us, vs = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5, indexing="ij")
    homogeneous = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)], axis=1)
    directions = np.linalg.solve(matrix, homogeneous.T).T
    nearest = np.full(us.size, np.inf)
    labels = np.full(us.size, int(Label.Unknown), dtype=np.int64)
    for box in boxes:
        entry = _ray_box_entry(center, directions, box)
        closer = entry <= nearest
        closer &= np.isfinite(entry)
        nearest = np.where(closer, entry, nearest)
        labels[closer] = int(box.label)
    return labels.reshape(camera.width, camera.height)


def _scores_from_labels(labels_image: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    draws = rng.random(labels_image.shape)
    partners = noise.partner_table()
    observed = labels_image.copy()
    labelled = observed >= 0
    partner = np.where(labelled, partners[np.where(labelled, observed, 0)], -1)
    flip = labelled & (partner >= 0) & (draws < noise.confusion_rate)
    observed[flip] = partner[flip]

    scores = np.full(labels_image.shape + (NUM_LABELS,), 1.0 / NUM_LABELS)
    if np.isinf(noise.softmax_sharpness):
        peak, rest = 1.0, 0.0
    else:
        weight = np.exp(noise.softmax_sharpness)
        peak, rest = weight / (weight + NUM_LABELS - 1), 1.0 / (weight + NUM_LABELS - 1)
    columns, rows = np.nonzero(labelled)
    scores[columns, rows] = rest
    scores[columns, rows, observed[columns, rows]] = peak
    # スコアファイルは float32 なので同じ精度で保持する
    return scores.astype(np.float32).astype(np.float64)


def frame_rng(scene: SceneSpec, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([scene.seed, frame_index]))


def simulate_frame(
    scene: SceneSpec,
    frame_index: int,
    sensor: Optional[SensorSpec] = None,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> SimulatedFrame:
    """
    1フレーム分の姿勢・点群（センサ座標）・セグメンテーションを生成する

    Args:
        scene: シーン
        frame_index: フレーム番号
        sensor: センサ設定
        noise: 混同ノイズ
        rng: 乱数生成器（省略時は (seed, frame_index) から作る）

    Returns:
        SimulatedFrame
    """
    sensor = sensor or SensorSpec()
    noise = noise or NoiseSpec()
    rng = rng if rng is not None else frame_rng(scene, frame_index)
    samples = frame_surface_samples(scene, frame_index, sensor)
    pose = scene.trajectory[frame_index]
    boxes = scene.boxes_at(frame_index)
    world_camera = sensor.camera().for_pose(pose)
    if sensor.visibility == "raycast":
        labels_image = _render_raycast(boxes, world_camera)
    else:
        labels_image = _render_splat(samples, boxes, world_camera, sensor.voxel_size)
    scores = _scores_from_labels(labels_image, noise, rng)
    cloud = PointCloud(samples.sensor, np.zeros(samples.sensor.shape[0]), frame_index)
    logger.debug("frame %d: %d 点を生成", frame_index, len(cloud))
    return SimulatedFrame(pose, cloud, SegmentationFrame(scores, frame_index))


class SyntheticFrameSource:
    """シーンからフレームをその場で生成する入力源"""

    def __init__(
        self,
        scene: SceneSpec,
        sensor: Optional[SensorSpec] = None,
        noise: Optional[NoiseSpec] = None,
    ):
        self.scene = scene
        self.sensor = sensor or SensorSpec()
        self.noise = noise or NoiseSpec()
        self.camera = self.sensor.camera()

    def __len__(self) -> int:
        return len(self.scene.trajectory)

    def get_frame(self, index: int) -> FrameData:
        return FrameData(*simulate_frame(self.scene, index, self.sensor, self.noise))


# ----------------------------------------------------------------------
# 正解マップ

def generate_ground_truth(scene: SceneSpec, voxel_size: float = DEFAULT_VOXEL_SIZE) -> SemanticVoxelMap:
    """
    静止物体の内部に中心があるボクセルを one-hot で並べた正解マップ

    箱が重なる部分は後に並んだ箱のラベルになる。
    """
    truth = SemanticVoxelMap(voxel_size)
    for box in scene.primitives:
        lo = np.asarray(box.minimum) / voxel_size
        hi = np.asarray(box.maximum) / voxel_size
        ranges = [np.arange(int(np.floor(l)) - 1, int(np.ceil(h)) + 1) for l, h in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        keys = grid[_inside(voxel_centers(grid, voxel_size), box)]
        one_hot = np.zeros(NUM_LABELS)
        one_hot[int(box.label)] = 1.0
        for row in keys.tolist():
            truth.cells[VoxelKey(*row)] = VoxelCell(one_hot.copy(), box.label, 1)
    logger.info("正解マップ: %d ボクセル", len(truth))
    return truth


# ----------------------------------------------------------------------
# シーン構築

def straight_trajectory(
    n_frames: int,
    start: Tuple[float, float, float] = (0.0, 0.0, SENSOR_HEIGHT),
    step: Tuple[float, float, float] = (1.0, 0.0, 0.0),
    yaw: float = 0.0,
) -> List[Pose]:
    """一定の向き yaw [rad] で step ずつ進む軌跡"""
    if n_frames < 1:
        raise ValidationError(f"フレーム数は1以上が必要です: {n_frames}")
    rotation = Rotation.from_euler("z", yaw).as_matrix()
    start_point = np.asarray(start, dtype=np.float64)
    step_vector = np.asarray(step, dtype=np.float64)
    return [Pose(rotation, start_point + i * step_vector, i) for i in range(n_frames)]


def build_street_scene(
    n_frames: int = 6,
    parked_car: bool = True,
    moving_car: bool = True,
    seed: int = 0,
) -> SceneSpec:
    """道路・歩道・建物の壁・生垣と、任意で駐車車両と走行車両を置いた市街地シーン"""
    primitives = [
        Primitive(Label.Road, (-2.0, -4.0, -0.2), (40.0, 4.0, 0.0)),
        Primitive(Label.Sidewalk, (-2.0, 4.4, -0.2), (40.0, 6.0, 0.0)),
        Primitive(Label.Building, (5.0, 7.0, 0.0), (30.0, 7.4, 6.0)),
        Primitive(Label.Vegetation, (0.0, -7.4, 0.0), (35.0, -7.0, 3.0)),
    ]
    if parked_car:
        primitives.append(Primitive(Label.Vehicle, (14.0, 1.8, 0.0), (18.0, 3.6, 1.6)))
    moving = []
    if moving_car:
        moving.append(
            MovingPrimitive(Primitive(Label.Vehicle, (8.0, -3.4, 0.0), (12.0, -1.6, 1.6)), (2.0, 0.0, 0.0))
        )
    return SceneSpec(primitives, moving, straight_trajectory(n_frames), seed)


# ----------------------------------------------------------------------
# シーンファイル

SECTIONS = ("scene", "primitives", "moving", "trajectory", "noise", "sensor")


def _parse_box(tokens: List[str], path: Union[str, Path], line_number: int) -> Primitive:
    try:
        label = parse_label(tokens[0])
        values = [float(token) for token in tokens[1:7]]
        return Primitive(label, tuple(values[:3]), tuple(values[3:]))
    except (ValueError, SemanticMapError) as exc:
        raise FormatError(f"{path}: 箱の定義が不正です: {exc}", line_number=line_number) from None


def _parse_setting(key: str, value: str):
    if key == "confusion_pairs":
        if value.lower() == "none":
            return []
        pairs = []
        for item in value.split(","):
            first, second = item.split(":")
            pairs.append((parse_label(first), parse_label(second)))
        return pairs
    for convert in (int, float):
        try:
            return convert(value)
        except ValueError:
            pass
    return value


def load_scene(path: Union[str, Path]) -> SceneFile:
    """
    シーンファイルを読み込む

    セクション [scene] [primitives] [moving] [trajectory] [noise] [sensor] からなり、
    '#' 以降はコメント。エラーには行番号が付く。
    """
    section: Optional[str] = None
    primitives: List[Primitive] = []
    moving: List[MovingPrimitive] = []
    trajectory: List[Pose] = []
    settings: Dict[str, Dict[str, object]] = {"scene": {}, "noise": {}, "sensor": {}}
    section_lines: Dict[str, int] = {}
    setting_lines: Dict[Tuple[str, str], int] = {}

    for line_number, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise FormatError(f"{path}: 不明なセクションです: [{section}]", line_number=line_number)
            section_lines[section] = line_number
            continue
        if section is None:
            raise FormatError(f"{path}: セクションの外に記述があります", line_number=line_number)
        tokens = line.split()
        if section in settings:
            if "=" not in line:
                raise FormatError(f"{path}: 'key = value' 形式ではありません", line_number=line_number)
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                settings[section][key] = _parse_setting(key, value)
                setting_lines[(section, key)] = line_number
            except ValueError:
                raise FormatError(f"{path}: 値を解釈できません: {value}", line_number=line_number) from None
        elif section == "primitives":
            if len(tokens) != 7:
                raise FormatError(f"{path}: 箱の行には7個の値が必要です（{len(tokens)} 個）", line_number=line_number)
            primitives.append(_parse_box(tokens, path, line_number))
        elif section == "moving":
            if len(tokens) != 10:
                raise FormatError(f"{path}: 移動物体の行には10個の値が必要です（{len(tokens)} 個）", line_number=line_number)
            box = _parse_box(tokens[:7], path, line_number)
            try:
                velocity = tuple(float(token) for token in tokens[7:])
            except ValueError:
                raise FormatError(f"{path}: 速度を解釈できません", line_number=line_number) from None
            moving.append(MovingPrimitive(box, velocity))
        elif section == "trajectory":
            if len(tokens) != 12:
                raise FormatError(f"{path}: 姿勢行には12個の値が必要です（{len(tokens)} 個）", line_number=line_number)
            try:
                matrix = np.array([float(token) for token in tokens]).reshape(3, 4)
                trajectory.append(Pose.from_matrix(matrix, len(trajectory)))
            except (ValueError, SemanticMapError) as exc:
                raise FormatError(f"{path}: 姿勢が不正です: {exc}", line_number=line_number) from None

    unknown = set(settings["scene"]) - {"seed"}
    if unknown:
        raise FormatError(f"{path}: [scene] の不明なキー: {sorted(unknown)}", line_number=section_lines.get("scene"))
    seed = settings["scene"].get("seed", 0)
    if not isinstance(seed, int):
        raise FormatError(
            f"{path}: seed は整数が必要です: {seed!r}",
            line_number=setting_lines.get(("scene", "seed"), section_lines.get("scene")),
        )
    try:
        scene = SceneSpec(primitives, moving, trajectory, seed)
    except (ValueError, SemanticMapError) as exc:
        raise FormatError(f"{path}: シーンが不正です: {exc}", line_number=section_lines.get("scene")) from None
    models = {"noise": NoiseSpec, "sensor": SensorSpec}
    parsed = {}
    for name, model in models.items():
        try:
            parsed[name] = model.model_validate(settings[name])
        except PydanticValidationError as exc:
            message = "; ".join(error["msg"] for error in exc.errors())
            raise FormatError(f"{path}: [{name}] が不正です: {message}", line_number=section_lines.get(name)) from None
    logger.info(
        "%s: 箱 %d、移動物体 %d、フレーム %d", path, len(primitives), len(moving), len(trajectory)
    )
    return SceneFile(scene, parsed["noise"], parsed["sensor"])


def _format_box(box: Primitive) -> str:
    values = " ".join(repr(v) for v in (*box.minimum, *box.maximum))
    return f"{box.label.name} {values}"


def write_scene(scene_file: SceneFile, path: Union[str, Path]) -> None:
    scene, noise, sensor = scene_file
    lines = ["[scene]", f"seed = {scene.seed}", "", "[primitives]"]
    lines += [_format_box(box) for box in scene.primitives]
    lines += ["", "[moving]"]
    lines += [
        f"{_format_box(m.box)} {' '.join(repr(float(v)) for v in m.velocity)}" for m in scene.moving_objects
    ]
    lines += ["", "[trajectory]"]
    lines += [" ".join(repr(float(v)) for v in pose.as_matrix()[:3].ravel()) for pose in scene.trajectory]
    lines += ["", "[noise]", f"confusion_rate = {noise.confusion_rate!r}", f"softmax_sharpness = {noise.softmax_sharpness!r}"]
    pairs = ", ".join(f"{a.name}:{b.name}" for a, b in noise.confusion_pairs)
    lines.append(f"confusion_pairs = {pairs or 'none'}")
    lines += ["", "[sensor]"]
    for name, value in sensor.model_dump().items():
        if value is not None:
            lines.append(f"{name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------
# エンドツーエンド

@dataclass
class SyntheticRunResult:
    ground_truth: SemanticVoxelMap
    unrefined: SemanticVoxelMap
    refined: Optional[SemanticVoxelMap]
    unrefined_report: MetricsReport
    refined_report: Optional[MetricsReport]


class EndToEndReports(NamedTuple):
    unrefined: MetricsReport
    refined: Optional[MetricsReport]


def restrict_map(semantic_map: SemanticVoxelMap, keys: Set[VoxelKey]) -> SemanticVoxelMap:
    return SemanticVoxelMap(
        semantic_map.voxel_size,
        {key: cell for key, cell in semantic_map.cells.items() if key in keys},
    )


def run_synthetic_pipeline(
    scene: SceneSpec,
    noise: Optional[NoiseSpec] = None,
    sensor: Optional[SensorSpec] = None,
    params: Optional[RefineParams] = None,
    refine: bool = True,
    prob_floor: float = DEFAULT_PROB_FLOOR,
    depth_buffer: bool = False,
    workers: int = 1,
) -> SyntheticRunResult:
    """
    合成シーンでマッピング・融合・確定・（後処理）を実行し、正解と比較する

    正解はマッピング結果に存在するキーへ限定し、予測にだけ存在するボクセル
    （移動物体の軌跡など）は FP として数える。workers はフレーム生成の先読み並列数。
    """
    from ..config import PipelineConfig
    from ..pipeline import SemanticMappingPipeline

    sensor = sensor or SensorSpec()
    config = PipelineConfig(
        voxel_size=sensor.voxel_size,
        prob_floor=prob_floor,
        depth_buffer=depth_buffer,
        refine=refine,
        refine_params=params or RefineParams(),
        workers=workers,
    )
    state = SemanticMappingPipeline(config).run(SyntheticFrameSource(scene, sensor, noise))
    unrefined = state["unrefined_map"]
    refined = state["refined_map"]

    truth = restrict_map(generate_ground_truth(scene, sensor.voxel_size), unrefined.keys())
    unrefined_report = evaluate(unrefined, truth, count_excluded=True)
    refined_report = evaluate(refined, truth, count_excluded=True) if refined is not None else None
    return SyntheticRunResult(truth, unrefined, refined, unrefined_report, refined_report)


def run_end_to_end(
    scene: SceneSpec,
    noise: Optional[NoiseSpec] = None,
    params: Optional[RefineParams] = None,
    sensor: Optional[SensorSpec] = None,
) -> EndToEndReports:
    """後処理前と後の評価レポートを返す"""
    result = run_synthetic_pipeline(scene, noise, sensor, params)
    return EndToEndReports(result.unrefined_report, result.refined_report)
