#!/usr/bin/env python
"""
例外定義

Mixed LRMoE ライブラリ全体で使用する例外クラスを定義します。
入力エラーは ValueError、数値計算上の失敗は RuntimeError を継承します。
"""


class LRMoEError(Exception):
    """ライブラリ共通の基底例外"""


class InvalidArgumentError(LRMoEError, ValueError):
    """不正な引数（非有限値、形状の不一致、パラメータ範囲外など）"""


class InvalidConfigurationError(LRMoEError, ValueError):
    """不正な設定（FitConfig / SimSpec など）"""


class DatasetFormatError(LRMoEError, ValueError):
    """データセットファイルの解析エラー

    Attributes:
        line_numbers: 解析できなかった行番号（ヘッダーを1行目とする、最大10件）
    """

    def __init__(self, message: str, line_numbers=None):
        super().__init__(message)
        self.line_numbers = list(line_numbers or [])


class UndefinedCurveError(LRMoEError, ValueError):
    """Lorenz曲線が定義できない場合（損失合計が0など）"""


class ArchiveError(LRMoEError, ValueError):
    """モデルアーカイブのスキーマ不一致・破損"""


class InitializationError(LRMoEError, RuntimeError):
    """初期化時のELBOが -inf となった場合

    Attributes:
        diagnostics: 診断情報のリスト
    """

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class NumericalError(LRMoEError, RuntimeError):
    """推定中の数値計算エラー"""
