"""
KITTI形式の入力とスコアマップの読み書き、マップの保存・PLY出力

- Velodyne .bin: リトルエンディアン float32 の (x, y, z, reflectance) 16バイトレコード
- 姿勢ファイル: 1行12個の実数（行優先の 3x4 [R|t]）
- スコアマップ (.sscr): "SSCR" + <III W H C + float32 データ（行ごと、画素内でチャネル連続）
- マップファイル: 先頭行 "voxel_size <s>"、以降1行1ボクセル
"ix iy iz label p0 p1 p2 p3 p4 obs_count"

読み込みは切り詰めずに拒否し、エラーには行番号かバイトオフセットを付ける。
"""

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import polar

from .exceptions import ConfigurationError, DataError, FormatError, ValidationError
from .frames import FrameData
from .geometry_map import PointCloud, Pose, VoxelKey, voxel_center
from .labels import LABEL_PALETTE, NUM_LABELS, parse_label
from .semantic_fusion import CameraModel, SegmentationFrame, SemanticVoxelMap, VoxelCell

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VELODYNE_RECORD_BYTES = 16
SCORE_MAGIC = b"SSCR"
SCORE_HEADER = struct.Struct("<III")
SCORE_DATA_OFFSET = len(SCORE_MAGIC) + SCORE_HEADER.size
POSE_ORTHONORMAL_TOLERANCE = 1e-3
POSE_DET_TOLERANCE = 0.1
MAP_TOKENS = 4 + NUM_LABELS + 1
FRAME_NAME = re.compile(r"^(\d+)$")


# ----------------------------------------------------------------------
# Velodyne

def read_velodyne_bin(path: PathLike, frame_index: int = 0) -> PointCloud:
    """
    KITTI Velodyne の .bin ファイルを読み込む

    座標か反射強度に NaN/Inf を含むレコードは取り除き、件数を警告として出力する。

    Args:
        path: .bin ファイルのパス
        frame_index: 点群に付けるフレーム番号

    Returns:
        PointCloud（反射強度付き）
    """
    raw = Path(path).read_bytes()
    remainder = len(raw) % VELODYNE_RECORD_BYTES
    if remainder:
        raise FormatError(
            f"{path}: ファイルサイズ {len(raw)} が16バイトの倍数ではありません",
            byte_offset=len(raw) - remainder,
        )
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(records), axis=1)
    rejected = int((~finite).sum())
    if rejected:
        first = int(np.flatnonzero(~finite)[0])
        logger.warning(
            "%s: 有限でない値を含むレコード %d 件を除外しました（最初のバイトオフセット %d）",
            path,
            rejected,
            first * VELODYNE_RECORD_BYTES,
        )
        records = records[finite]
    return PointCloud(records[:, :3], records[:, 3], frame_index)


def write_velodyne_bin(cloud: PointCloud, path: PathLike) -> None:
    intensity = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    records = np.column_stack([cloud.points, intensity]).astype("<f4")
    Path(path).write_bytes(records.tobytes())


# ----------------------------------------------------------------------
# 姿勢

def _parse_floats(tokens: Sequence[str], path: PathLike, line_number: int) -> np.ndarray:
    try:
        return np.array([float(token) for token in tokens], dtype=np.float64)
    except ValueError:
        raise FormatError(f"{path}: 数値として解釈できない値があります", line_number=line_number) from None


def read_pose_file(path: PathLike) -> List[Pose]:
    """
    KITTI odometry 形式の姿勢ファイルを読み込む

    回転行列は |RᵀR − I| <= 1e-3 と |det R − 1| <= 0.1 を検証した上で、
    極分解により最も近い回転行列へ射影する。
    """
    poses: List[Pose] = []
    for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise FormatError(
                f"{path}: 姿勢行には12個の値が必要です（{len(tokens)} 個）", line_number=line_number
            )
        matrix = _parse_floats(tokens, path, line_number).reshape(3, 4)
        if not np.all(np.isfinite(matrix)):
            raise FormatError(f"{path}: 有限でない値があります", line_number=line_number)
        rotation = matrix[:, :3]
        deviation = float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))
        if deviation > POSE_ORTHONORMAL_TOLERANCE:
            raise ValidationError(
                f"{path}: 回転行列が正規直交ではありません |R^T R - I|_max = {deviation:.3e}",
                line_number=line_number,
            )
        det = float(np.linalg.det(rotation))
        if abs(det - 1.0) > POSE_DET_TOLERANCE:
            raise ValidationError(
                f"{path}: 回転行列の行列式が1から離れています det = {det:.6f}",
                line_number=line_number,
            )
        nearest, _ = polar(rotation)
        poses.append(Pose(nearest, matrix[:, 3], len(poses)))
    logger.info("%s: %d 個の姿勢を読み込みました", path, len(poses))
    return poses


def write_pose_file(poses: Sequence[Pose], path: PathLike) -> None:
    lines = []
    for pose in poses:
        matrix = pose.as_matrix()[:3, :]
        lines.append(" ".join(repr(float(value)) for value in matrix.ravel()))
    Path(path).write_text("".join(line + "\n" for line in lines))


# ----------------------------------------------------------------------
# スコアマップ

def read_score_map(path: PathLike, frame_index: int = 0) -> SegmentationFrame:
    """
    SSCR 形式のスコアマップを読み込む

    Raises:
        FormatError: マジック・チャネル数・サイズの不一致
        DataError: 負または有限でないスコア
    """
    raw = Path(path).read_bytes()
    if len(raw) < SCORE_DATA_OFFSET:
        raise FormatError(f"{path}: ヘッダが不完全です", byte_offset=len(raw))
    if raw[: len(SCORE_MAGIC)] != SCORE_MAGIC:
        raise FormatError(f"{path}: マジックが SSCR ではありません", byte_offset=0)
    width, height, channels = SCORE_HEADER.unpack_from(raw, len(SCORE_MAGIC))
    if channels != NUM_LABELS:
        raise FormatError(
            f"{path}: チャネル数は {NUM_LABELS} が必要です（{channels}）", byte_offset=12
        )
    expected = SCORE_DATA_OFFSET + width * height * channels * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: サイズが一致しません（期待 {expected}、実際 {len(raw)}）",
            byte_offset=min(len(raw), expected),
        )
    values = np.frombuffer(raw, dtype="<f4", offset=SCORE_DATA_OFFSET)
    bad = ~np.isfinite(values) | (values < 0)
    if bad.any():
        offset = SCORE_DATA_OFFSET + 4 * int(np.flatnonzero(bad)[0])
        raise DataError(f"{path}: 負または有限でないスコアがあります", byte_offset=offset)
    scores = values.reshape(height, width, channels).transpose(1, 0, 2).astype(np.float64)
    return SegmentationFrame(scores, frame_index)


def write_score_map(seg: SegmentationFrame, path: PathLike) -> None:
    header = SCORE_MAGIC + SCORE_HEADER.pack(seg.width, seg.height, NUM_LABELS)
    body = np.ascontiguousarray(seg.scores.transpose(1, 0, 2)).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


# ----------------------------------------------------------------------
# マップ

def write_ply(semantic_map: SemanticVoxelMap, path: PathLike) -> None:
    """ボクセル中心をラベル色付きの ASCII PLY で書き出す"""
    keys = sorted(semantic_map.cells)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(keys)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for key in keys:
        x, y, z = voxel_center(key, semantic_map.voxel_size)
        red, green, blue = LABEL_PALETTE[semantic_map.cells[key].final_label]
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {red} {green} {blue}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    logger.info("%s: %d 個の頂点を書き出しました", path, len(keys))


def serialize_map(semantic_map: SemanticVoxelMap, path: PathLike) -> None:
    lines = [f"voxel_size {semantic_map.voxel_size!r}"]
    for key in sorted(semantic_map.cells):
        cell = semantic_map.cells[key]
        probabilities = " ".join(repr(float(p)) for p in cell.distribution)
        lines.append(
            f"{key.ix} {key.iy} {key.iz} {cell.final_label.name} {probabilities} {cell.observation_count}"
        )
    Path(path).write_text("".join(line + "\n" for line in lines))


def deserialize_map(path: PathLike) -> SemanticVoxelMap:
    """serialize_map の出力を読み戻す"""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: ヘッダ行がありません", line_number=1)
    header = lines[0].split()
    if len(header) != 2 or header[0] != "voxel_size":
        raise FormatError(f"{path}: ヘッダは 'voxel_size <s>' が必要です", line_number=1)
    voxel_size = float(_parse_floats(header[1:], path, 1)[0])
    if not voxel_size > 0:
        raise FormatError(f"{path}: voxel_size は正の値が必要です", line_number=1)

    semantic_map = SemanticVoxelMap(voxel_size)
    for line_number, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != MAP_TOKENS:
            raise FormatError(
                f"{path}: ボクセル行には{MAP_TOKENS}個の値が必要です（{len(tokens)} 個）",
                line_number=line_number,
            )
        try:
            key = VoxelKey(int(tokens[0]), int(tokens[1]), int(tokens[2]))
            label = parse_label(tokens[3])
            observations = int(tokens[-1])
        except ValueError:
            raise FormatError(f"{path}: キー・ラベル・観測回数を解釈できません", line_number=line_number) from None
        distribution = _parse_floats(tokens[4:-1], path, line_number)
        if (
            not np.all(np.isfinite(distribution))
            or np.any(distribution < 0)
            or abs(distribution.sum() - 1.0) > 1e-6
            or observations < 0
        ):
            raise DataError(f"{path}: 不正なラベル分布または観測回数です", line_number=line_number)
        if key in semantic_map.cells:
            raise FormatError(f"{path}: ボクセル {tuple(key)} が重複しています", line_number=line_number)
        semantic_map.cells[key] = VoxelCell(distribution, label, observations)
    logger.info("%s: %d 個のボクセルを読み込みました", path, len(semantic_map))
    return semantic_map


# ----------------------------------------------------------------------
# キャリブレーション

@dataclass(frozen=True)
class CalibrationSet:
    """合成済みの Lidar→画像 射影行列 P_L2C と画像サイズ"""
    lidar_to_camera: np.ndarray
    width: int
    height: int

    def camera(self) -> CameraModel:
        return CameraModel(self.lidar_to_camera, self.width, self.height)


def _read_key_values(path: PathLike) -> Dict[str, Tuple[int, str]]:
    entries: Dict[str, Tuple[int, str]] = {}
    for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError(f"{path}: 'key: values' 形式ではありません", line_number=line_number)
        key, value = line.split(":", 1)
        entries[key.strip()] = (line_number, value.strip())
    return entries


def _matrix_entry(
    entries: Dict[str, Tuple[int, str]], key: str, shape: Tuple[int, ...], path: PathLike
) -> np.ndarray:
    if key not in entries:
        raise FormatError(f"{path}: '{key}' がありません")
    line_number, text = entries[key]
    values = _parse_floats(text.split(), path, line_number)
    if values.size != int(np.prod(shape)):
        raise FormatError(
            f"{path}: '{key}' には {int(np.prod(shape))} 個の値が必要です（{values.size} 個）",
            line_number=line_number,
        )
    return values.reshape(shape)


def _homogeneous(matrix: np.ndarray) -> np.ndarray:
    result = np.eye(4)
    result[: matrix.shape[0], : matrix.shape[1]] = matrix
    return result


def _image_size(entries: Dict[str, Tuple[int, str]], key: str, path: PathLike) -> Tuple[int, int]:
    width, height = _matrix_entry(entries, key, (2,), path)
    if width <= 0 or height <= 0 or width != int(width) or height != int(height):
        raise FormatError(f"{path}: 画像サイズが不正です", line_number=entries[key][0])
    return int(width), int(height)


def read_calibration(path: PathLike) -> CalibrationSet:
    """
    キャリブレーションファイルを読み込む

    合成済みの形式（P_L2C と image_size）と、KITTI odometry の calib.txt
    （P2 と Tr、および image_size）の両方を受け付ける。後者は P2·[Tr; 0 0 0 1] を計算する。
    """
    entries = _read_key_values(path)
    width, height = _image_size(entries, "image_size", path)
    if "P_L2C" in entries:
        projection = _matrix_entry(entries, "P_L2C", (3, 4), path)
    elif "P2" in entries and "Tr" in entries:
        projection = _matrix_entry(entries, "P2", (3, 4), path) @ _homogeneous(
            _matrix_entry(entries, "Tr", (3, 4), path)
        )
    else:
        raise FormatError(f"{path}: 'P_L2C' または 'P2' と 'Tr' が必要です")
    calibration = CalibrationSet(projection, width, height)
    calibration.camera()
    return calibration


def write_calibration(calibration: CalibrationSet, path: PathLike) -> None:
    values = " ".join(repr(float(v)) for v in calibration.lidar_to_camera.ravel())
    Path(path).write_text(
        f"P_L2C: {values}\nimage_size: {calibration.width} {calibration.height}\n"
    )


def compose_kitti_raw_calibration(
    velo_to_cam_path: PathLike,
    cam_to_cam_path: PathLike,
    camera: int = 2,
) -> CalibrationSet:
    """
    KITTI raw の calib_velo_to_cam.txt と calib_cam_to_cam.txt から P_L2C を合成する

    P_L2C = P_rect_0c · R_rect_00 · Tr_velo_to_cam。画像サイズは S_rect_0c から取る。
    """
    velo = _read_key_values(velo_to_cam_path)
    cam = _read_key_values(cam_to_cam_path)
    extrinsic = np.hstack(
        [
            _matrix_entry(velo, "R", (3, 3), velo_to_cam_path),
            _matrix_entry(velo, "T", (3, 1), velo_to_cam_path),
        ]
    )
    rectification = _matrix_entry(cam, "R_rect_00", (3, 3), cam_to_cam_path)
    projection = _matrix_entry(cam, f"P_rect_{camera:02d}", (3, 4), cam_to_cam_path)
    width, height = _image_size(cam, f"S_rect_{camera:02d}", cam_to_cam_path)
    composed = projection @ _homogeneous(rectification) @ _homogeneous(extrinsic)
    return CalibrationSet(composed, width, height)


# ----------------------------------------------------------------------
# ディレクトリ入力

def _indexed_files(directory: Path, suffix: str) -> Dict[int, Path]:
    files: Dict[int, Path] = {}
    if not directory.is_dir():
        raise ConfigurationError(f"ディレクトリがありません: {directory}")
    for path in sorted(directory.glob(f"*{suffix}")):
        match = FRAME_NAME.match(path.stem)
        if match is None:
            raise ConfigurationError(f"フレーム番号として解釈できないファイル名です: {path.name}")
        files[int(match.group(1))] = path
    return files


class FileFrameSource:
    """
    KITTI 形式のファイル群から番号順にフレームを読み出す入力源

    velodyne/NNNNNN.bin と scores/NNNNNN.sscr を番号で対応付け、
    姿勢ファイルの行と合わせる。
    """

    def __init__(
        self,
        poses_path: PathLike,
        velodyne_dir: PathLike,
        scores_dir: PathLike,
        calib_path: PathLike,
    ):
        self.poses = read_pose_file(poses_path)
        self.clouds = _indexed_files(Path(velodyne_dir), ".bin")
        self.scores = _indexed_files(Path(scores_dir), ".sscr")
        counts = (len(self.poses), len(self.clouds), len(self.scores))
        if len(set(counts)) != 1:
            raise ConfigurationError(
                f"フレーム数が一致しません: poses={counts[0]}, clouds={counts[1]}, score_maps={counts[2]}"
            )
        if counts[0] == 0:
            raise ConfigurationError("フレームがありません: poses=0, clouds=0, score_maps=0")
        expected = list(range(counts[0]))
        if sorted(self.clouds) != expected or sorted(self.scores) != expected:
            raise ConfigurationError(
                f"ファイル番号が 0..{counts[0] - 1} の連番になっていません"
            )
        self.camera = read_calibration(calib_path).camera()

    @classmethod
    def from_directory(cls, root: PathLike) -> "FileFrameSource":
        """cmd_synth が出力するディレクトリ構成から作成する"""
        root = Path(root)
        return cls(root / "poses.txt", root / "velodyne", root / "scores", root / "calib.txt")

    def __len__(self) -> int:
        return len(self.poses)

    def get_frame(self, index: int) -> FrameData:
        return FrameData(
            self.poses[index],
            read_velodyne_bin(self.clouds[index], index),
            read_score_map(self.scores[index], index),
        )
