"""
共通ユーティリティ
設定ファイル読み込み、出力ディレクトリ、CSVヘッダー定義、例外クラス、ログ設定、乱数ストリーム
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict

import numpy as np
import yaml
from dotenv import load_dotenv

load_dotenv()

PROJECT_ROOT = Path(__file__).parent.parent.parent


def load_config(config_file: str = 'config/chunksearch_config.yaml') -> Dict[str, Any]:
    """設定ファイルを読み込む"""
    config_path = Path(config_file)
    if not config_path.is_absolute():
        config_path = PROJECT_ROOT / config_file
    with open(config_path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f) or {}


def load_tasks_config(tasks_file: str = 'config/tasks.yaml') -> Dict[str, Any]:
    """タスク設定ファイルを読み込む"""
    return load_config(tasks_file)


def get_output_dir() -> Path:
    """出力ディレクトリ（.envの CHUNKSEARCH_OUTPUT_DIR で変更可）"""
    return Path(os.getenv('CHUNKSEARCH_OUTPUT_DIR', 'outputs'))


def ensure_data_directory(data_path: str) -> None:
    """データディレクトリが存在しない場合は作成"""
    Path(data_path).parent.mkdir(parents=True, exist_ok=True)


def setup_logging(level: str = None) -> None:
    """ログ設定（一度だけ）"""
    level = level or os.getenv('CHUNKSEARCH_LOG_LEVEL', 'INFO')
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


# メトリクスCSVヘッダーの統一定義
METRICS_HEADERS = [
    'run_id', 'config_hash', 'seed', 'task', 'variant', 'demos', 'round', 'phase',
    'env_steps', 'eval_success_rate', 'eval_episodes',
    'wm_pred', 'wm_dyn', 'wm_rep', 'rm_moment', 'rm_penalty', 'critic_mse',
    'bc_loss', 'planner_best_q', 'planner_mu_norm', 'distilled'
]

RM_TRACE_HEADERS = ['run_id', 'seed', 'round', 'episode', 'step', 'rm_score', 'success']

TTS_HEADERS = [
    'run_id', 'config_hash', 'seed', 'task', 'variant', 'num_samples',
    'iterations', 'eval_success_rate', 'eval_episodes',
    'mppi_iteration_seconds', 'ddim_sample_seconds'
]


class ChunksearchError(Exception):
    """プロジェクト共通の基底例外"""


class ConfigError(ChunksearchError):
    """設定値の検証エラー"""


class UnknownTaskError(ChunksearchError, KeyError):
    """未登録タスク名"""


class EnvContractError(ChunksearchError):
    """環境の契約違反（終了後のstepなど）"""


class DemoCollectionError(ChunksearchError):
    """リトライ上限内に必要数の成功デモが集まらない"""


class NonFiniteError(ChunksearchError, FloatingPointError):
    """NaN/Infを検出"""


class ShapeError(ChunksearchError, ValueError):
    """形状の不一致"""


class PlannerError(ChunksearchError):
    """プランナーの失敗（有効な候補がない等）"""


class CheckpointError(ChunksearchError):
    """チェックポイントの読み書きエラー"""


class SchemaError(ChunksearchError):
    """メトリクスファイルのスキーマ・ハッシュ不一致"""


class PhaseError(ChunksearchError):
    """学習フェーズ中のエラー（フェーズ・ラウンド情報付き）"""

    def __init__(self, phase: str, round_index: int, step: int, cause: Exception):
        self.phase = phase
        self.round_index = round_index
        self.step = step
        self.cause = cause
        super().__init__(f"{phase} failed at round {round_index}, step {step}: {cause}")


STREAM_NAMES = ('policy', 'wm', 'planner', 'explore', 'batch', 'env')


class RngStreams:
    """用途ごとに独立した乱数ストリーム（プランナーの有無で方策の乱数がずれない）"""

    def __init__(self, seed: int):
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
        for name, child in zip(STREAM_NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def get_state(self) -> Dict[str, Any]:
        return {name: getattr(self, name).bit_generator.state for name in STREAM_NAMES}

    def set_state(self, state: Dict[str, Any]) -> None:
        for name in STREAM_NAMES:
            getattr(self, name).bit_generator.state = state[name]
