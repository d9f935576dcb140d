"""
テスト共通のフィクスチャ
"""

import os
import sys

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, PROJECT_ROOT)

from src.expcli.config import load_run_config, with_updates  # noqa: E402


@pytest.fixture(autouse=True)
def project_cwd(monkeypatch):
    """config/ の相対パスを解決できるようにする"""
    monkeypatch.chdir(PROJECT_ROOT)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def smoke_config():
    return load_run_config(profile='smoke')


@pytest.fixture
def tiny_config(smoke_config):
    """ユニットテスト用にさらに小さくした設定"""
    return with_updates(smoke_config, 'schedule.budget=200', 'schedule.round_env_steps=80',
                        'schedule.round_grad_steps=3', 'evaluation.episodes=1',
                        'policy.pretrain_iterations=10')


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    out = tmp_path / 'outputs'
    monkeypatch.setenv('CHUNKSEARCH_OUTPUT_DIR', str(out))
    return out
