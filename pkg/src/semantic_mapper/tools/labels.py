"""
ラベル定義とカラーパレット
"""

from enum import IntEnum
from typing import Dict, Tuple


class Label(IntEnum):
    """セマンティックラベル

    分布に参加するのは先頭5ラベルのみ。Unknown は未観測ボクセル用の番兵。
    値の順序がそのまま argmax の同点時の優先順位になる。
    """
    Road = 0
    Sidewalk = 1
    Vehicle = 2
    Building = 3
    Vegetation = 4
    Unknown = -1


SEMANTIC_LABELS: Tuple[Label, ...] = (
    Label.Road,
    Label.Sidewalk,
    Label.Vehicle,
    Label.Building,
    Label.Vegetation,
)
NUM_LABELS = len(SEMANTIC_LABELS)

# Cityscapes 準拠の配色
LABEL_PALETTE: Dict[Label, Tuple[int, int, int]] = {
    Label.Road: (128, 64, 128),
    Label.Sidewalk: (244, 35, 232),
    Label.Vehicle: (0, 0, 142),
    Label.Building: (70, 70, 70),
    Label.Vegetation: (107, 142, 35),
    Label.Unknown: (0, 0, 0),
}


def parse_label(text: str) -> Label:
    """ラベル名（大文字小文字を区別しない）または整数値からラベルを得る"""
    token = text.strip()
    for label in Label:
        if label.name.lower() == token.lower():
            return label
    try:
        return Label(int(token))
    except ValueError:
        raise ValueError(f"不明なラベルです: {text!r}") from None
