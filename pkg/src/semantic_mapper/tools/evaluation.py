"""
予測セマンティックマップの評価

クラスごとの Accuracy = TP/(TP+FP)（一般的な呼び方では適合率）と
IoU = TP/(TP+FP+FN) を計算する。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .exceptions import ConfigurationError
from .labels import NUM_LABELS, SEMANTIC_LABELS, Label
from .semantic_fusion import SemanticVoxelMap

logger = logging.getLogger(__name__)

NOT_APPLICABLE = "n/a"


def _zeros() -> np.ndarray:
    return np.zeros(NUM_LABELS, dtype=np.int64)


@dataclass
class ConfusionMatrix:
    """
    混同行列（行 = 正解、列 = 予測）

    Attributes:
        counts: 両方のマップに存在し、予測が確定しているボクセルの 5x5 集計
        excluded_by_label: 予測にだけ存在するボクセル数（予測ラベル別）
        missed_by_label: 予測に無い、または Unknown と予測された正解ボクセル数（正解ラベル別）
        excluded_unlabeled: 予測にだけ存在し予測ラベルも Unknown のボクセル数
    """
    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_LABELS, NUM_LABELS), dtype=np.int64))
    excluded_by_label: np.ndarray = field(default_factory=_zeros)
    missed_by_label: np.ndarray = field(default_factory=_zeros)
    excluded_unlabeled: int = 0

    @property
    def excluded(self) -> int:
        return int(self.excluded_by_label.sum()) + self.excluded_unlabeled

    @property
    def missed_unknown(self) -> int:
        return int(self.missed_by_label.sum())

    @property
    def matched(self) -> int:
        return int(self.counts.sum()) + self.missed_unknown


def _label_frame(semantic_map: SemanticVoxelMap, column: str) -> pd.DataFrame:
    keys = list(semantic_map.cells)
    coords = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    labels = np.fromiter(
        (int(semantic_map.cells[key].final_label) for key in keys), dtype=np.int64, count=len(keys)
    )
    return pd.DataFrame(
        {"ix": coords[:, 0], "iy": coords[:, 1], "iz": coords[:, 2], column: labels}
    )


def confusion(pred: SemanticVoxelMap, truth: SemanticVoxelMap) -> ConfusionMatrix:
    """
    同一キーのボクセル同士を突き合わせて混同行列を作る

    Args:
        pred: 予測マップ
        truth: 正解マップ

    Returns:
        ConfusionMatrix
    """
    if pred.voxel_size != truth.voxel_size:
        raise ConfigurationError(
            f"ボクセルサイズが一致しません: pred={pred.voxel_size}, truth={truth.voxel_size}"
        )
    merged = pd.merge(
        _label_frame(truth, "truth"),
        _label_frame(pred, "pred"),
        on=["ix", "iy", "iz"],
        how="outer",
        indicator=True,
    )
    unknown = int(Label.Unknown)
    cm = ConfusionMatrix()

    # 正解ラベルが Unknown のボクセルは評価対象外
    truth_side = merged[merged["_merge"] != "right_only"]
    truth_side = truth_side[truth_side["truth"] != unknown]
    truth_labels = truth_side["truth"].to_numpy(dtype=np.int64)
    pred_labels = truth_side["pred"].fillna(unknown).to_numpy(dtype=np.int64)

    hit = pred_labels != unknown
    flat = truth_labels[hit] * NUM_LABELS + pred_labels[hit]
    cm.counts = np.bincount(flat, minlength=NUM_LABELS * NUM_LABELS).reshape(NUM_LABELS, NUM_LABELS)
    cm.missed_by_label = np.bincount(truth_labels[~hit], minlength=NUM_LABELS)

    pred_only = merged.loc[merged["_merge"] == "right_only", "pred"].to_numpy(dtype=np.int64)
    cm.excluded_by_label = np.bincount(pred_only[pred_only != unknown], minlength=NUM_LABELS)
    cm.excluded_unlabeled = int((pred_only == unknown).sum())
    logger.debug(
        "confusion: matched=%d excluded=%d missed=%d", cm.matched, cm.excluded, cm.missed_unknown
    )
    return cm


def accuracy(cm: ConfusionMatrix, label: Label, count_excluded: bool = False) -> Optional[float]:
    """
    TP / (TP + FP)。分母が0なら None

    count_excluded=True のとき、予測にだけ存在するボクセルをそのラベルの FP に含める。
    """
    index = int(label)
    tp = int(cm.counts[index, index])
    fp = int(cm.counts[:, index].sum()) - tp
    if count_excluded:
        fp += int(cm.excluded_by_label[index])
    if tp + fp == 0:
        return None
    return tp / (tp + fp)


def iou(cm: ConfusionMatrix, label: Label, count_excluded: bool = False) -> Optional[float]:
    """TP / (TP + FP + FN)。FN には予測漏れ（Unknown・欠落）を含む。分母が0なら None"""
    index = int(label)
    tp = int(cm.counts[index, index])
    fp = int(cm.counts[:, index].sum()) - tp
    if count_excluded:
        fp += int(cm.excluded_by_label[index])
    fn = int(cm.counts[index, :].sum()) - tp + int(cm.missed_by_label[index])
    if tp + fp + fn == 0:
        return None
    return tp / (tp + fp + fn)


def _mean(values: List[Optional[float]]) -> Optional[float]:
    defined = [value for value in values if value is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def _format_value(value: Optional[float]) -> str:
    if value is None or pd.isna(value):
        return NOT_APPLICABLE
    return f"{value:.6f}"


@dataclass
class MetricsReport:
    """クラス別の Accuracy / IoU と平均、ボクセル数の集計"""
    accuracy: Dict[Label, Optional[float]]
    iou: Dict[Label, Optional[float]]
    mean_accuracy: Optional[float]
    mean_iou: Optional[float]
    n_truth: int
    n_predicted: int
    confusion: ConfusionMatrix

    def to_table(self) -> pd.DataFrame:
        """クラスごとの行と Average 行を持つ表"""
        rows = {label.name: [self.accuracy[label], self.iou[label]] for label in SEMANTIC_LABELS}
        rows["Average"] = [self.mean_accuracy, self.mean_iou]
        return pd.DataFrame.from_dict(rows, orient="index", columns=["accuracy", "iou"])

    def format_table(self) -> str:
        table = self.to_table().apply(lambda column: column.map(_format_value))
        return table.to_string()

    def to_key_values(self) -> List[str]:
        lines = []
        for label in SEMANTIC_LABELS:
            lines.append(f"accuracy.{label.name}={_format_value(self.accuracy[label])}")
            lines.append(f"iou.{label.name}={_format_value(self.iou[label])}")
        lines.append(f"accuracy.Average={_format_value(self.mean_accuracy)}")
        lines.append(f"iou.Average={_format_value(self.mean_iou)}")
        lines.append(f"voxels.truth={self.n_truth}")
        lines.append(f"voxels.predicted={self.n_predicted}")
        lines.append(f"voxels.excluded={self.confusion.excluded}")
        lines.append(f"voxels.missed_unknown={self.confusion.missed_unknown}")
        return lines


def evaluate(
    pred: SemanticVoxelMap,
    truth: SemanticVoxelMap,
    count_excluded: bool = False,
    observed_only: bool = False,
) -> MetricsReport:
    """
    予測マップを正解マップで評価する

    Args:
        pred: 予測マップ
        truth: 正解マップ
        count_excluded: 予測にだけ存在するボクセルを FP として数える
        observed_only: 正解を予測に存在するキーへ限定する

    Returns:
        MetricsReport（平均は値が定義されたクラスのみの単純平均）
    """
    if observed_only:
        truth = SemanticVoxelMap(
            truth.voxel_size, {key: cell for key, cell in truth.cells.items() if key in pred.cells}
        )
    cm = confusion(pred, truth)
    accuracies = {label: accuracy(cm, label, count_excluded) for label in SEMANTIC_LABELS}
    ious = {label: iou(cm, label, count_excluded) for label in SEMANTIC_LABELS}
    report = MetricsReport(
        accuracy=accuracies,
        iou=ious,
        mean_accuracy=_mean(list(accuracies.values())),
        mean_iou=_mean(list(ious.values())),
        n_truth=len(truth),
        n_predicted=len(pred),
        confusion=cm,
    )
    logger.info(
        "評価: mean accuracy=%s mean IoU=%s",
        _format_value(report.mean_accuracy),
        _format_value(report.mean_iou),
    )
    return report
