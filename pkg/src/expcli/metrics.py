"""
メトリクスCSV・RMトレース・JSONサマリーの書き出し
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.utils.common import (METRICS_HEADERS, RM_TRACE_HEADERS, TTS_HEADERS, SchemaError,
                              ensure_data_directory)

logger = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1


class MetricsWriter:
    """固定ヘッダーのCSVに行を追記する（ヘッダーはファイル作成時に一度だけ）"""

    def __init__(self, path, headers: Sequence[str] = METRICS_HEADERS):
        self.path = Path(path)
        self.headers = list(headers)

    def append(self, rows: List[Dict]) -> None:
        if not rows:
            return
        ensure_data_directory(str(self.path))
        df = pd.DataFrame([{col: row.get(col) for col in self.headers} for row in rows], columns=self.headers)
        file_exists = self.path.exists()
        df.to_csv(self.path, mode='a', header=not file_exists, index=False, float_format='%.6g')
        logger.debug("appended %d rows to %s", len(rows), self.path)

    def reset(self) -> None:
        """新しく書き直す（既存ファイルを消す）"""
        if self.path.exists():
            self.path.unlink()

    def read(self) -> pd.DataFrame:
        return read_metrics(self.path, self.headers)

    def drop_after(self, seed: int, round_index: int) -> None:
        """再開時: チェックポイントより後のラウンドの行を消す"""
        if not self.path.exists():
            return
        df = self.read()
        keep = (df['seed'] != seed) | (df['round'] <= round_index)
        if keep.all():
            return
        df[keep].to_csv(self.path, index=False, float_format='%.6g')
        logger.info("dropped %d rows after round %d for seed %d", int((~keep).sum()), round_index, seed)


def read_metrics(path, headers: Sequence[str] = METRICS_HEADERS) -> pd.DataFrame:
    """メトリクスCSVを読み、列構成を確認する"""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"metrics file not found: {path}")
    df = pd.read_csv(path)
    if list(df.columns) != list(headers):
        raise SchemaError(f"{path}: unexpected columns {list(df.columns)}")
    return df


def metrics_row(run_id: str, config_hash: str, seed: int, task: str, variant: str, demos: int,
                report, result=None) -> Dict:
    """PhaseReport と評価結果から1行を作る"""
    diag = report.diagnostics
    return {
        'run_id': run_id,
        'config_hash': config_hash,
        'seed': seed,
        'task': task,
        'variant': variant,
        'demos': demos,
        'round': report.round_index,
        'phase': report.phase,
        'env_steps': report.env_steps,
        'eval_success_rate': result.success_rate if result is not None else None,
        'eval_episodes': result.episodes if result is not None else None,
        'wm_pred': diag.get('wm_pred'),
        'wm_dyn': diag.get('wm_dyn'),
        'wm_rep': diag.get('wm_rep'),
        'rm_moment': diag.get('rm_moment'),
        'rm_penalty': diag.get('rm_penalty'),
        'critic_mse': diag.get('critic_mse'),
        'bc_loss': diag.get('bc_loss'),
        'planner_best_q': None if math.isnan(report.planner_best_q) else report.planner_best_q,
        'planner_mu_norm': None if math.isnan(report.planner_mu_norm) else report.planner_mu_norm,
        'distilled': int(report.distilled),
    }


def rm_trace_rows(run_id: str, seed: int, round_index: int, traces: List[Dict]) -> List[Dict]:
    return [{'run_id': run_id, 'seed': seed, 'round': round_index, **trace} for trace in traces]


def tts_row(run_id: str, config_hash: str, seed: int, task: str, variant: str, num_samples: int,
            iterations: int, result) -> Dict:
    return {
        'run_id': run_id,
        'config_hash': config_hash,
        'seed': seed,
        'task': task,
        'variant': variant,
        'num_samples': num_samples,
        'iterations': iterations,
        'eval_success_rate': result.success_rate,
        'eval_episodes': result.episodes,
        'mppi_iteration_seconds': None if math.isnan(result.mppi_iteration_seconds)
        else result.mppi_iteration_seconds,
        'ddim_sample_seconds': None if math.isnan(result.ddim_sample_seconds) else result.ddim_sample_seconds,
    }


def mean_and_stderr(values: Sequence[float]):
    """平均と標準誤差（1シードなら標準誤差は0）"""
    values = np.asarray([v for v in values if v is not None and not math.isnan(v)], dtype=np.float64)
    if values.size == 0:
        return float('nan'), float('nan')
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def final_success_rates(df: pd.DataFrame, phases: Sequence[str] = ('warm_start', 'online')) -> Dict[int, float]:
    """シードごとの最後の評価成功率"""
    rows = df[df['phase'].isin(phases) & df['eval_success_rate'].notna()]
    finals = rows.sort_values(['seed', 'env_steps', 'round']).groupby('seed').tail(1)
    return {int(r.seed): float(r.eval_success_rate) for r in finals.itertuples()}


def build_summary(run_id: str, config_hash: str, task: str, variant: str, df: pd.DataFrame,
                  rm_separation: Optional[Dict[int, Dict[str, float]]] = None) -> Dict:
    """JSONサマリーを組み立てる"""
    finals = final_success_rates(df)
    mean, stderr = mean_and_stderr(list(finals.values()))
    summary = {
        'schema_version': SUMMARY_SCHEMA_VERSION,
        'run_id': run_id,
        'config_hash': config_hash,
        'task': task,
        'variant': variant,
        'seeds': sorted(finals),
        'final_success_rate': {str(s): r for s, r in sorted(finals.items())},
        'success_rate_mean': mean,
        'success_rate_stderr': stderr,
    }
    distilled = final_success_rates(df, phases=('posthoc',))
    if distilled:
        d_mean, d_stderr = mean_and_stderr(list(distilled.values()))
        summary['distilled_success_rate'] = {str(s): r for s, r in sorted(distilled.items())}
        summary['distilled_success_rate_mean'] = d_mean
        summary['distilled_success_rate_stderr'] = d_stderr
    if rm_separation:
        summary['rm_separation'] = {str(s): stats for s, stats in sorted(rm_separation.items())}
    return summary


def save_summary(path, summary: Dict) -> None:
    ensure_data_directory(str(path))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2, allow_nan=True)
    logger.info("summary saved: %s", path)


def load_summary(path) -> Dict:
    with open(path, 'r', encoding='utf-8') as f:
        summary = json.load(f)
    if summary.get('schema_version') != SUMMARY_SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported summary schema {summary.get('schema_version')}")
    return summary


def rm_trace_writer(path) -> MetricsWriter:
    return MetricsWriter(path, RM_TRACE_HEADERS)


def tts_writer(path) -> MetricsWriter:
    return MetricsWriter(path, TTS_HEADERS)
