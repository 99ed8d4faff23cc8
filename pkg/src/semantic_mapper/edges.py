"""
マッピングパイプラインのエッジ（ルーティング）実装
"""

from typing import Literal

from .state import MappingState


def router(state: MappingState) -> Literal[
    "integrate", "fuse", "finalize", "refine", "error_handler", "completed"
]:
    """
    現在の状態に基づいて次のノードを決定する

    Args:
        state: 現在のパイプライン状態

    Returns:
        次に実行するノードの名前
    """
    next_action = state.get("next_action")

    if next_action in ("integrate", "fuse", "finalize", "refine", "error_handler", "completed"):
        return next_action
    # 未知のアクションはエラーハンドラーへ
    return "error_handler"


def should_continue(state: MappingState) -> Literal["continue", "end"]:
    """
    ワークフローを継続するかどうかを決定する

    Returns:
        "continue": ワークフローを継続
        "end": ワークフローを終了
    """
    if state.get("next_action") == "completed":
        return "end"
    return "continue"


def validate_state_transition(current_state: MappingState, next_node: str) -> bool:
    """
    直前のノードから next_node への遷移が有効かどうかを検証する

    Args:
        current_state: 現在の状態
        next_node: 次のノード名

    Returns:
        遷移が有効な場合True
    """
    valid_transitions = {
        "prepare": ["integrate", "error_handler"],
        "integrate": ["fuse", "error_handler"],
        "fuse": ["integrate", "finalize", "error_handler"],
        "finalize": ["refine", "completed", "error_handler"],
        "refine": ["completed", "error_handler"],
        "error_handler": ["completed"],
    }
    current_stage = current_state.get("current_stage")
    if not current_stage:
        return next_node == "prepare"
    return next_node in valid_transitions.get(current_stage, [])


def get_workflow_status(state: MappingState) -> dict:
    """
    ワークフローの現在のステータスを取得する

    Returns:
        ステータス情報の辞書
    """
    next_action = state.get("next_action")
    error_message = state.get("error_message")

    status = {
        "current_step": next_action,
        "is_completed": next_action == "completed",
        "has_error": error_message is not None,
        "frames_done": state.get("current_frame", 0),
        "frame_count": state.get("frame_count", 0),
        "progress_percentage": _calculate_progress(state),
    }
    if error_message:
        status["error_message"] = error_message
        status["error_category"] = state.get("error_category")
    return status


def _calculate_progress(state: MappingState) -> int:
    """フレーム処理は 10〜80% の範囲で按分する"""
    next_action = state.get("next_action")
    if next_action in ("integrate", "fuse"):
        frame_count = state.get("frame_count") or 1
        return 10 + int(70 * state.get("current_frame", 0) / frame_count)
    progress_map = {
        "finalize": 80,
        "refine": 90,
        "completed": 100,
        "error_handler": 0,
    }
    return progress_map.get(next_action, 0)
