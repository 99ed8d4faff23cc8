"""
パイプライン設定と環境変数の読み込み

アルゴリズムの既定値はコードにのみ持ち、環境変数からは実行時の設定
（並列数とログレベル）だけを読む。
"""

import logging
import os
from typing import NamedTuple, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

from .tools.exceptions import ConfigurationError
from .tools.geometry_map import DEFAULT_VOXEL_SIZE
from .tools.refinement import RefineParams
from .tools.semantic_fusion import DEFAULT_PROB_FLOOR

WORKERS_ENV = "SEMMAP_WORKERS"
LOG_LEVEL_ENV = "SEMMAP_LOG_LEVEL"
DEFAULT_LOG_LEVEL = "WARNING"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class PipelineConfig(BaseModel):
    """マッピングパイプラインの設定"""
    voxel_size: float = Field(DEFAULT_VOXEL_SIZE, gt=0, description="ボクセルサイズ [m]")
    prob_floor: float = Field(DEFAULT_PROB_FLOOR, ge=0, lt=0.2, description="ラベル確率の下限")
    depth_buffer: bool = Field(False, description="同一画素では最も手前のボクセルだけ更新する")
    refine: bool = Field(True, description="3D後処理を行う")
    refine_params: RefineParams = Field(default_factory=RefineParams)
    workers: int = Field(1, ge=1, description="フレーム読み込みの並列数")


class RuntimeSettings(NamedTuple):
    workers: int
    log_level: str


def load_environment(dotenv_path: Optional[str] = None) -> RuntimeSettings:
    """
    .env と環境変数から実行時設定を読み込む

    Returns:
        RuntimeSettings
    """
    load_dotenv(dotenv_path)

    workers_text = os.getenv(WORKERS_ENV, "1")
    try:
        workers = int(workers_text)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} は整数が必要です: {workers_text!r}") from None
    if workers < 1:
        raise ConfigurationError(f"{WORKERS_ENV} は1以上が必要です: {workers}")

    log_level = os.getenv(LOG_LEVEL_ENV, DEFAULT_LOG_LEVEL).upper()
    if log_level not in LOG_LEVELS:
        raise ConfigurationError(f"{LOG_LEVEL_ENV} が不正です: {log_level!r}")
    return RuntimeSettings(workers, log_level)


def configure_logging(level: str = DEFAULT_LOG_LEVEL) -> None:
    """ログを標準エラーへ出力するよう設定する"""
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
