"""
セマンティックマッピングパイプラインのメイン実装
"""

import time
from typing import Any, Dict, Iterator, Optional

from langgraph.graph import END, StateGraph

from .config import PipelineConfig
from .edges import router
from .nodes import MappingPipelineNodes
from .state import MappingState, create_initial_state, update_state
from .tools.exceptions import error_category
from .tools.frames import FrameSource
from .tools.semantic_fusion import SemanticVoxelMap


class SemanticMappingPipeline:
    """点群と画像セグメンテーションから3Dセマンティックマップを作るパイプライン"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        """
        Args:
            config: パイプライン設定（指定しない場合は既定値）
        """
        self.config = config or PipelineConfig()
        self.nodes = MappingPipelineNodes(self.config)
        self.workflow = self._build_workflow()
        self.app = self.workflow.compile(debug=False)

    def _build_workflow(self) -> StateGraph:
        """LangGraphワークフローを構築"""
        workflow = StateGraph(MappingState)

        workflow.add_node("prepare", self.nodes.prepare_node)
        workflow.add_node("integrate", self.nodes.integrate_node)
        workflow.add_node("fuse", self.nodes.fuse_node)
        workflow.add_node("finalize", self.nodes.finalize_node)
        workflow.add_node("refine", self.nodes.refine_node)
        workflow.add_node("error_handler", self.nodes.error_handler_node)

        workflow.set_entry_point("prepare")

        workflow.add_conditional_edges(
            "prepare",
            router,
            {
                "integrate": "integrate",
                "error_handler": "error_handler"
            }
        )
        workflow.add_conditional_edges(
            "integrate",
            router,
            {
                "fuse": "fuse",
                "error_handler": "error_handler"
            }
        )
        workflow.add_conditional_edges(
            "fuse",
            router,
            {
                "integrate": "integrate",
                "finalize": "finalize",
                "error_handler": "error_handler"
            }
        )
        workflow.add_conditional_edges(
            "finalize",
            router,
            {
                "refine": "refine",
                "completed": END,
                "error_handler": "error_handler"
            }
        )
        workflow.add_conditional_edges(
            "refine",
            router,
            {
                "completed": END,
                "error_handler": "error_handler"
            }
        )
        workflow.add_conditional_edges(
            "error_handler",
            router,
            {
                "completed": END
            }
        )
        return workflow

    def _run_config(self, source: FrameSource) -> Dict[str, Any]:
        # integrate と fuse をフレームごとに1回ずつ通る
        return {"recursion_limit": 3 * len(source) + 20}

    def invoke(
        self,
        source: FrameSource,
        truth_map: Optional[SemanticVoxelMap] = None,
    ) -> MappingState:
        """
        パイプラインを実行する

        Args:
            source: フレーム入力源
            truth_map: 評価用の正解マップ（指定時は評価レポートも作る）

        Returns:
            最終状態（失敗時は error_message と error_category が入る）
        """
        start_time = time.time()
        initial_state = create_initial_state(source, self.config, truth_map)
        try:
            result = self.app.invoke(initial_state, config=self._run_config(source))
        except Exception as e:
            result = update_state(
                initial_state,
                error_message=f"パイプライン実行エラー: {e}",
                error_category=error_category(e),
                error=e,
                next_action="completed",
            )
        result["execution_time"] = time.time() - start_time
        return result

    def run(
        self,
        source: FrameSource,
        truth_map: Optional[SemanticVoxelMap] = None,
    ) -> MappingState:
        """invoke と同じだが、失敗時は元の例外を送出する"""
        result = self.invoke(source, truth_map)
        if result.get("error") is not None:
            raise result["error"]
        return result

    def stream(
        self,
        source: FrameSource,
        truth_map: Optional[SemanticVoxelMap] = None,
    ) -> Iterator[Dict[str, Any]]:
        """
        パイプラインをストリーミング実行する

        Yields:
            各ノードの実行結果 {ノード名: 状態}
        """
        initial_state = create_initial_state(source, self.config, truth_map)
        try:
            for chunk in self.app.stream(initial_state, config=self._run_config(source)):
                yield chunk
        except Exception as e:
            yield {
                "error": {
                    "error_message": f"ストリーミング実行エラー: {e}",
                    "error_category": error_category(e),
                }
            }

    def get_workflow_diagram(self) -> str:
        """ワークフロー図をテキストで返す"""
        return """
        セマンティックマッピング ワークフロー

        [Start] → prepare
                     ↓
                 integrate ←──────┐
                     ↓            │ 次のフレーム
                   fuse ──────────┘
                     ↓ 最終フレーム後
                  finalize ──→ [End]（refine=False）
                     ↓
                   refine
                     ↓
                   [End]

        各ノードで例外が起きた場合は error_handler → [End]
        """


def create_pipeline(config: Optional[PipelineConfig] = None) -> SemanticMappingPipeline:
    """
    パイプラインを作成する便利関数

    Args:
        config: パイプライン設定

    Returns:
        SemanticMappingPipeline
    """
    return SemanticMappingPipeline(config)
