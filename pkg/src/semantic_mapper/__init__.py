"""
セマンティック3Dマッピングシステム

Lidar 点群をボクセル地図へ統合し、画像セグメンテーションのラベル分布を
ベイズ更新で融合したうえで、3D後処理（柱ラベル補正と移動物体除去）を行う。
パイプラインは LangGraph のワークフローとして実行する。
"""

from .config import PipelineConfig, load_environment
from .pipeline import SemanticMappingPipeline, create_pipeline
from .state import MappingState, create_initial_state
from .nodes import MappingPipelineNodes
from .edges import router, should_continue

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "load_environment",
    "SemanticMappingPipeline",
    "create_pipeline",
    "MappingState",
    "create_initial_state",
    "MappingPipelineNodes",
    "router",
    "should_continue"
]
