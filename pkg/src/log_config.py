#!/usr/bin/env python
"""
ロガー設定

CLIおよびMCPサーバーのエントリポイントで使用するロガーを構築します。
ライブラリ側のモジュールは logging.getLogger(__name__) のみを使用し、ハンドラは設定しません。
"""

import os
import logging
from pathlib import Path
from typing import Optional

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logger(name: str, log_dir: Optional[str] = None, level: Optional[str] = None) -> logging.Logger:
    """ファイル出力付きのロガーを作成します。

    Args:
        name: ロガー名（ログファイル名にも使用）
        log_dir: ログ出力ディレクトリ。省略時は環境変数 LRMOE_LOG_DIR、なければ "logs"
        level: ログレベル名。省略時は環境変数 LRMOE_LOG_LEVEL、なければ "INFO"

    Returns:
        logging.Logger: 設定済みロガー
    """
    log_dir = log_dir or os.environ.get("LRMOE_LOG_DIR", "logs")
    level_name = (level or os.environ.get("LRMOE_LOG_LEVEL", "INFO")).upper()
    log_level = getattr(logging, level_name, logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(log_level)

    # 同じファイルへのハンドラを二重に登録しない
    log_path = Path(log_dir) / f"{name}.log"
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and Path(handler.baseFilename) == log_path.resolve():
            return logger

    # ファイルハンドラの設定
    log_path.parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(log_path, encoding="utf-8")
    file_handler.setLevel(log_level)

    # フォーマッタの設定
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    # ハンドラの追加
    logger.addHandler(file_handler)
    return logger
