"""
マッピングパイプラインの状態管理モジュール
"""

import time
from typing import Any, Dict, List, Optional, Set

from typing_extensions import TypedDict

from .config import PipelineConfig
from .tools.evaluation import MetricsReport
from .tools.frames import FrameData, FrameSource
from .tools.geometry_map import OccupancyMap, VoxelKey
from .tools.semantic_fusion import SemanticVoxelMap


class MappingState(TypedDict):
    """セマンティックマッピングパイプラインの状態"""
    source: FrameSource                          # フレーム入力源
    pipeline_config: PipelineConfig              # パイプライン設定
    truth_map: Optional[SemanticVoxelMap]        # 評価用の正解マップ
    frame_count: int                             # フレーム数
    current_frame: int                           # 次に処理するフレーム番号
    frame_data: Optional[FrameData]              # 処理中のフレーム
    frame_keys: Optional[Set[VoxelKey]]          # 処理中フレームで統合したボクセル
    occupancy: Optional[OccupancyMap]            # 占有マップ
    semantic_map: Optional[SemanticVoxelMap]     # 融合中のマップ
    unrefined_map: Optional[SemanticVoxelMap]    # 確定済み（後処理前）
    refined_map: Optional[SemanticVoxelMap]      # 後処理後
    unrefined_report: Optional[MetricsReport]    # 後処理前の評価
    refined_report: Optional[MetricsReport]      # 後処理後の評価
    stage_log: List[Dict[str, Any]]              # ステージ実行履歴
    current_stage: Optional[str]                 # 直前に実行したノード
    error_message: Optional[str]                 # エラーメッセージ
    error_category: Optional[str]                # エラーカテゴリ
    error: Optional[BaseException]               # 発生した例外
    execution_time: Optional[float]              # 実行時間
    next_action: Optional[str]                   # 次アクション


def create_initial_state(
    source: FrameSource,
    config: Optional[PipelineConfig] = None,
    truth_map: Optional[SemanticVoxelMap] = None,
) -> MappingState:
    """初期状態を作成する"""
    return MappingState(
        source=source,
        pipeline_config=config or PipelineConfig(),
        truth_map=truth_map,
        frame_count=0,
        current_frame=0,
        frame_data=None,
        frame_keys=None,
        occupancy=None,
        semantic_map=None,
        unrefined_map=None,
        refined_map=None,
        unrefined_report=None,
        refined_report=None,
        stage_log=[],
        current_stage=None,
        error_message=None,
        error_category=None,
        error=None,
        execution_time=None,
        next_action=None,
    )


def update_state(state: MappingState, **kwargs: Any) -> MappingState:
    """状態を更新する（未定義のキーは無視）"""
    new_state = state.copy()
    for key, value in kwargs.items():
        if key in MappingState.__annotations__:
            new_state[key] = value
    return new_state


def add_stage_record(
    state: MappingState,
    stage: str,
    success: bool = True,
    **details: Any,
) -> MappingState:
    """ステージ実行履歴を追加する"""
    record = {
        "stage": stage,
        "success": success,
        "details": details,
        "timestamp": time.time(),
    }
    new_state = state.copy()
    new_state["stage_log"] = state["stage_log"] + [record]
    return new_state


def has_error(state: MappingState) -> bool:
    """エラー状態かどうかを判定する"""
    return state.get("error_message") is not None


def clear_error(state: MappingState) -> MappingState:
    """エラー状態をクリアする"""
    new_state = state.copy()
    new_state["error_message"] = None
    new_state["error_category"] = None
    new_state["error"] = None
    return new_state


def set_next_action(state: MappingState, action: str) -> MappingState:
    """次のアクションを設定する"""
    new_state = state.copy()
    new_state["next_action"] = action
    return new_state
