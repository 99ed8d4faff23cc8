"""
マッピングパイプラインのノード実装
"""

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Dict, Optional

from .config import PipelineConfig
from .state import MappingState, add_stage_record, update_state
from .tools.evaluation import evaluate
from .tools.exceptions import ConfigurationError, error_category
from .tools.frames import FrameData
from .tools.geometry_map import OccupancyMap, integrate_frame, transform_cloud, voxelize
from .tools.refinement import refine
from .tools.semantic_fusion import SemanticVoxelMap, finalize_labels, fuse_frame

logger = logging.getLogger(__name__)


class MappingPipelineNodes:
    """セマンティックマッピングパイプラインのノード実装"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        """
        Args:
            config: パイプライン設定（既定値は PipelineConfig()）
        """
        self.config = config or PipelineConfig()
        self._executor: Optional[ThreadPoolExecutor] = None
        self._pending: Dict[int, Future] = {}

    def _fail(self, state: MappingState, stage: str, exc: Exception) -> MappingState:
        category = error_category(exc)
        logger.error("%s でエラー (category=%s): %s", stage, category, exc)
        state = add_stage_record(state, stage, success=False, error=str(exc))
        return update_state(
            state,
            current_stage=stage,
            error_message=str(exc),
            error_category=category,
            error=exc,
            next_action="error_handler",
        )

    def _shutdown(self) -> None:
        if self._executor is not None:
            for future in self._pending.values():
                future.cancel()
            self._executor.shutdown(wait=True)
        self._executor = None
        self._pending = {}

    def _load_frame(self, state: MappingState, index: int) -> FrameData:
        """フレームを読み込む（workers > 1 なら先読みする）"""
        source = state["source"]
        if self._executor is None:
            return source.get_frame(index)
        last = min(index + self.config.workers, state["frame_count"])
        for ahead in range(index, last):
            if ahead not in self._pending:
                self._pending[ahead] = self._executor.submit(source.get_frame, ahead)
        return self._pending.pop(index).result()

    def prepare_node(self, state: MappingState) -> MappingState:
        """入力源を検査して空のマップを用意するノード"""
        try:
            source = state["source"]
            frame_count = len(source)
            if frame_count == 0:
                raise ConfigurationError("フレームが1つもありません")

            self._shutdown()
            if self.config.workers > 1:
                self._executor = ThreadPoolExecutor(max_workers=self.config.workers)

            voxel_size = self.config.voxel_size
            logger.info("マッピング開始: %d フレーム, ボクセルサイズ %s", frame_count, voxel_size)
            state = add_stage_record(state, "prepare", frame_count=frame_count)
            return update_state(
                state,
                pipeline_config=self.config,
                frame_count=frame_count,
                current_frame=0,
                occupancy=OccupancyMap(voxel_size),
                semantic_map=SemanticVoxelMap(voxel_size),
                current_stage="prepare",
                next_action="integrate",
            )
        except Exception as e:
            return self._fail(state, "prepare", e)

    def integrate_node(self, state: MappingState) -> MappingState:
        """現在のフレームの点群を世界座標でボクセル化して蓄積するノード"""
        try:
            index = state["current_frame"]
            frame = self._load_frame(state, index)
            world = transform_cloud(frame.pose, frame.cloud)
            keys = voxelize(world, self.config.voxel_size)

            occupancy = integrate_frame(state["occupancy"], keys, index)
            semantic_map = state["semantic_map"]
            added = semantic_map.add_cells(keys)
            logger.debug("frame %d: %d 点 → %d ボクセル (新規 %d)", index, len(frame.cloud.points), len(keys), added)

            return update_state(
                state,
                frame_data=frame,
                frame_keys=keys,
                occupancy=occupancy,
                semantic_map=semantic_map,
                current_stage="integrate",
                next_action="fuse",
            )
        except Exception as e:
            return self._fail(state, "integrate", e)

    def fuse_node(self, state: MappingState) -> MappingState:
        """現在のフレームのセグメンテーションを候補ボクセルへ融合するノード"""
        try:
            index = state["current_frame"]
            frame = state["frame_data"]
            camera = state["source"].camera
            seg = frame.segmentation
            if (seg.width, seg.height) != (camera.width, camera.height):
                raise ConfigurationError(
                    f"frame {index}: スコアマップの大きさ {seg.width}x{seg.height} が"
                    f"カメラの画像サイズ {camera.width}x{camera.height} と一致しません"
                )

            semantic_map = fuse_frame(
                state["semantic_map"],
                camera.for_pose(frame.pose),
                seg,
                state["frame_keys"],
                self.config.prob_floor,
                self.config.depth_buffer,
            )

            next_frame = index + 1
            next_action = "integrate" if next_frame < state["frame_count"] else "finalize"
            return update_state(
                state,
                semantic_map=semantic_map,
                current_frame=next_frame,
                frame_data=None,
                frame_keys=None,
                current_stage="fuse",
                next_action=next_action,
            )
        except Exception as e:
            return self._fail(state, "fuse", e)

    def finalize_node(self, state: MappingState) -> MappingState:
        """確定ラベルを決め、正解マップがあれば評価するノード"""
        try:
            self._shutdown()
            unrefined = finalize_labels(state["semantic_map"])
            report = None
            if state.get("truth_map") is not None:
                report = evaluate(unrefined, state["truth_map"])

            state = add_stage_record(state, "finalize", voxels=len(unrefined))
            return update_state(
                state,
                unrefined_map=unrefined,
                unrefined_report=report,
                current_stage="finalize",
                next_action="refine" if self.config.refine else "completed",
            )
        except Exception as e:
            return self._fail(state, "finalize", e)

    def refine_node(self, state: MappingState) -> MappingState:
        """柱ラベル補正と移動物体除去を行うノード"""
        try:
            unrefined = state["unrefined_map"]
            refined = refine(unrefined, self.config.refine_params)
            report = None
            if state.get("truth_map") is not None:
                report = evaluate(refined, state["truth_map"])

            state = add_stage_record(
                state, "refine", voxels=len(refined), removed=len(unrefined) - len(refined)
            )
            return update_state(
                state,
                refined_map=refined,
                refined_report=report,
                current_stage="refine",
                next_action="completed",
            )
        except Exception as e:
            return self._fail(state, "refine", e)

    def error_handler_node(self, state: MappingState) -> MappingState:
        """エラーハンドラーノード"""
        self._shutdown()
        error_message = state.get("error_message") or "不明なエラーが発生しました"
        logger.warning("パイプラインを中断しました: %s", error_message)
        return update_state(
            state,
            error_message=error_message,
            error_category=state.get("error_category") or "other",
            current_stage="error_handler",
            next_action="completed",
        )
