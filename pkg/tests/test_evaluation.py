import numpy as np
import pandas as pd
import pytest

from src.semantic_mapper.tools.evaluation import (
    ConfusionMatrix,
    accuracy,
    confusion,
    evaluate,
    iou,
)
from src.semantic_mapper.tools.exceptions import ConfigurationError
from src.semantic_mapper.tools.geometry_map import VoxelKey
from src.semantic_mapper.tools.labels import NUM_LABELS, SEMANTIC_LABELS, Label
from src.semantic_mapper.tools.semantic_fusion import SemanticVoxelMap


def label_map(labels: dict, voxel_size: float = 0.2) -> SemanticVoxelMap:
    semantic_map = SemanticVoxelMap(voxel_size)
    semantic_map.add_cells(labels)
    for key, label in labels.items():
        semantic_map.cells[key].final_label = label
        semantic_map.cells[key].observation_count = 1
    return semantic_map


@pytest.fixture
def road_case():
    """正解 Road 10 個（予測 Road 8 / Sidewalk 2）と正解 Sidewalk 1 個（予測 Road）"""
    truth = {VoxelKey(i, 0, 0): Label.Road for i in range(10)}
    truth[VoxelKey(10, 0, 0)] = Label.Sidewalk
    pred = {VoxelKey(i, 0, 0): Label.Road for i in range(8)}
    pred[VoxelKey(8, 0, 0)] = Label.Sidewalk
    pred[VoxelKey(9, 0, 0)] = Label.Sidewalk
    pred[VoxelKey(10, 0, 0)] = Label.Road
    return label_map(pred), label_map(truth)


class TestConfusion:
    """混同行列のテスト"""

    def test_counts(self, road_case):
        """行が正解、列が予測"""
        pred, truth = road_case
        cm = confusion(pred, truth)
        assert cm.counts[int(Label.Road), int(Label.Road)] == 8
        assert cm.counts[int(Label.Road), int(Label.Sidewalk)] == 2
        assert cm.counts[int(Label.Sidewalk), int(Label.Road)] == 1
        assert cm.counts.sum() == 11
        assert cm.excluded == 0
        assert cm.missed_unknown == 0

    def test_missing_and_unknown_predictions_are_missed(self):
        """予測に無い、または Unknown の正解ボクセルは見逃し"""
        truth = label_map({VoxelKey(0, 0, 0): Label.Building, VoxelKey(1, 0, 0): Label.Building})
        pred = label_map({VoxelKey(1, 0, 0): Label.Unknown})
        cm = confusion(pred, truth)
        assert cm.counts.sum() == 0
        assert cm.missed_by_label[int(Label.Building)] == 2
        assert iou(cm, Label.Building) == 0.0
        assert accuracy(cm, Label.Building) is None

    def test_prediction_only_voxels_are_excluded(self):
        """正解に無い予測ボクセルは除外として数える"""
        truth = label_map({VoxelKey(0, 0, 0): Label.Vehicle})
        pred = label_map(
            {VoxelKey(0, 0, 0): Label.Vehicle, VoxelKey(5, 0, 0): Label.Vehicle, VoxelKey(6, 0, 0): Label.Unknown}
        )
        cm = confusion(pred, truth)
        assert cm.excluded_by_label[int(Label.Vehicle)] == 1
        assert cm.excluded_unlabeled == 1
        assert cm.excluded == 2
        assert accuracy(cm, Label.Vehicle) == 1.0
        assert accuracy(cm, Label.Vehicle, count_excluded=True) == 0.5
        assert iou(cm, Label.Vehicle, count_excluded=True) == 0.5

    def test_unknown_truth_ignored(self):
        """正解が Unknown のボクセルは評価対象外"""
        truth = label_map({VoxelKey(0, 0, 0): Label.Unknown})
        pred = label_map({VoxelKey(0, 0, 0): Label.Road})
        cm = confusion(pred, truth)
        assert cm.counts.sum() == 0
        assert cm.excluded == 0

    def test_voxel_size_mismatch(self):
        """ボクセルサイズが違えば ConfigurationError"""
        with pytest.raises(ConfigurationError):
            confusion(SemanticVoxelMap(0.2), SemanticVoxelMap(0.1))

    def test_undefined_metrics(self):
        """分母0のクラスは None"""
        cm = ConfusionMatrix()
        for label in SEMANTIC_LABELS:
            assert accuracy(cm, label) is None
            assert iou(cm, label) is None

    def test_iou_never_exceeds_accuracy(self):
        """ランダムな混同行列でも IoU <= 精度"""
        rng = np.random.default_rng(7)
        for _ in range(100):
            cm = ConfusionMatrix(
                counts=rng.integers(0, 20, size=(5, 5)),
                excluded_by_label=rng.integers(0, 5, size=5),
                missed_by_label=rng.integers(0, 5, size=5),
            )
            for label in SEMANTIC_LABELS:
                for count_excluded in (False, True):
                    acc = accuracy(cm, label, count_excluded)
                    value = iou(cm, label, count_excluded)
                    if acc is None:
                        assert value is None or value == 0.0
                    else:
                        assert value <= acc

    def test_matches_per_key_count(self):
        """ランダムな1000ボクセルでキーごとの素朴な集計と一致する"""
        rng = np.random.default_rng(10)
        all_labels = [Label.Unknown] + list(SEMANTIC_LABELS)
        keys = list({VoxelKey(*row) for row in rng.integers(0, 40, size=(1000, 3)).tolist()})
        truth_labels, pred_labels = {}, {}
        for key in keys:
            side = rng.integers(0, 3)
            if side != 1:
                truth_labels[key] = all_labels[rng.integers(0, len(all_labels))]
            if side != 2:
                pred_labels[key] = all_labels[rng.integers(0, len(all_labels))]

        expected = ConfusionMatrix()
        for key, truth_label in truth_labels.items():
            if truth_label == Label.Unknown:
                continue
            pred_label = pred_labels.get(key, Label.Unknown)
            if pred_label == Label.Unknown:
                expected.missed_by_label[int(truth_label)] += 1
            else:
                expected.counts[int(truth_label), int(pred_label)] += 1
        for key, pred_label in pred_labels.items():
            if key in truth_labels:
                continue
            if pred_label == Label.Unknown:
                expected.excluded_unlabeled += 1
            else:
                expected.excluded_by_label[int(pred_label)] += 1

        cm = confusion(label_map(pred_labels), label_map(truth_labels))
        np.testing.assert_array_equal(cm.counts, expected.counts)
        np.testing.assert_array_equal(cm.missed_by_label, expected.missed_by_label)
        np.testing.assert_array_equal(cm.excluded_by_label, expected.excluded_by_label)
        assert cm.excluded_unlabeled == expected.excluded_unlabeled

    def test_correcting_a_voxel_never_lowers_iou(self):
        """誤ったボクセルを正しいラベルへ直しても、そのクラスの IoU は下がらない"""
        rng = np.random.default_rng(11)
        for _ in range(50):
            keys = [VoxelKey(i, 0, 0) for i in range(60)]
            truth_labels = {key: SEMANTIC_LABELS[rng.integers(0, NUM_LABELS)] for key in keys}
            pred_labels = {key: SEMANTIC_LABELS[rng.integers(0, NUM_LABELS)] for key in keys}
            wrong = [key for key in keys if pred_labels[key] != truth_labels[key]]
            if not wrong:
                continue
            key = wrong[rng.integers(0, len(wrong))]
            label = truth_labels[key]
            before = iou(confusion(label_map(pred_labels), label_map(truth_labels)), label)
            pred_labels[key] = label
            after = iou(confusion(label_map(pred_labels), label_map(truth_labels)), label)
            assert after >= before


class TestEvaluate:
    """評価レポートのテスト"""

    def test_worked_example(self, road_case):
        """Road: Accuracy 8/9, IoU 8/11。Sidewalk: 0"""
        pred, truth = road_case
        report = evaluate(pred, truth)
        assert report.accuracy[Label.Road] == pytest.approx(8 / 9)
        assert report.iou[Label.Road] == pytest.approx(8 / 11)
        assert report.accuracy[Label.Sidewalk] == 0.0
        assert report.iou[Label.Sidewalk] == 0.0
        assert report.accuracy[Label.Vehicle] is None
        assert report.mean_accuracy == pytest.approx((8 / 9) / 2)
        assert report.mean_iou == pytest.approx((8 / 11) / 2)
        assert report.n_truth == 11
        assert report.n_predicted == 11

    def test_perfect_prediction(self):
        """予測が正解と一致すれば全クラス 1.0"""
        labels = {VoxelKey(i, 0, 0): label for i, label in enumerate(SEMANTIC_LABELS)}
        report = evaluate(label_map(labels), label_map(labels))
        assert all(value == 1.0 for value in report.accuracy.values())
        assert report.mean_iou == 1.0

    def test_observed_only_restricts_truth(self):
        """observed_only では予測に無い正解ボクセルを数えない"""
        truth = label_map({VoxelKey(0, 0, 0): Label.Road, VoxelKey(1, 0, 0): Label.Road})
        pred = label_map({VoxelKey(0, 0, 0): Label.Road})
        assert evaluate(pred, truth).iou[Label.Road] == 0.5
        report = evaluate(pred, truth, observed_only=True)
        assert report.iou[Label.Road] == 1.0
        assert report.n_truth == 1

    def test_table_and_key_values(self, road_case):
        """表とキー=値形式の出力"""
        pred, truth = road_case
        report = evaluate(pred, truth)
        table = report.to_table()
        assert list(table.index) == [label.name for label in SEMANTIC_LABELS] + ["Average"]
        assert pd.isna(table.loc["Vehicle", "accuracy"])
        assert "n/a" in report.format_table()

        lines = report.to_key_values()
        assert "accuracy.Road=0.888889" in lines
        assert "iou.Vehicle=n/a" in lines
        assert "voxels.truth=11" in lines
        assert "voxels.excluded=0" in lines
