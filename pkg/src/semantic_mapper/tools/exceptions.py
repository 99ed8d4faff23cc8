"""
セマンティック3Dマッピングで使用する例外クラス

全ての例外は ``category`` を持ち、CLIはこれを1行のエラー出力に使う。
既存の ``except ValueError`` でも捕捉できるよう ValueError を継承している。
"""

from typing import Optional

from pydantic import ValidationError as PydanticValidationError


class SemanticMapError(ValueError):
    """セマンティックマッピング処理の基底例外"""

    category: str = "error"

    def __init__(
        self,
        message: str,
        line_number: Optional[int] = None,
        byte_offset: Optional[int] = None,
    ):
        """
        Args:
            message: エラーメッセージ
            line_number: エラー箇所の行番号（1始まり、テキスト形式の場合）
            byte_offset: エラー箇所のバイトオフセット（バイナリ形式の場合）
        """
        self.line_number = line_number
        self.byte_offset = byte_offset
        location = ""
        if line_number is not None:
            location = f" (line {line_number})"
        elif byte_offset is not None:
            location = f" (byte offset {byte_offset})"
        super().__init__(f"{message}{location}")


class ValidationError(SemanticMapError):
    """入力値の不変条件違反（非正規直交な回転行列など）"""

    category = "validation"


class ParameterError(SemanticMapError):
    """パラメータ範囲外（voxel_size <= 0 など）"""

    category = "parameter"


class SequencingError(SemanticMapError):
    """フレーム順序の違反"""

    category = "sequencing"


class FormatError(SemanticMapError):
    """ファイル形式の違反"""

    category = "format"


class DataError(SemanticMapError):
    """形式は正しいが値が不正（負のスコアなど）"""

    category = "data"


class ConfigurationError(SemanticMapError):
    """入力の組み合わせが不整合（フレーム数不一致、ボクセルサイズ不一致など）"""

    category = "configuration"


class DegenerateEvidenceError(SemanticMapError):
    """ベイズ更新の正規化定数が0に近すぎる"""

    category = "degenerate-evidence"


class UsageError(SemanticMapError):
    """コマンドライン引数の誤り"""

    category = "usage"


def error_category(exc: BaseException) -> str:
    """例外をCLIのエラーカテゴリへ対応付ける"""
    if isinstance(exc, SemanticMapError):
        return exc.category
    if isinstance(exc, PydanticValidationError):
        return "parameter"
    if isinstance(exc, OSError):
        return "io"
    return "other"
