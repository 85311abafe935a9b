import sys
import os

import pytest

sys.path.insert(0, os.getcwd())


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    """ログの出力先をテスト用の一時ディレクトリにする"""
    monkeypatch.setenv("LRMOE_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("LRMOE_DEFAULT_SEED", raising=False)
