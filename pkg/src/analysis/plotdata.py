"""
メトリクスCSVから図ごとの縦持ちCSV（x, y, series, seed）を作る。描画はしない
"""

import logging
from pathlib import Path
from typing import List, Sequence

import pandas as pd

from src.utils.common import METRICS_HEADERS, TTS_HEADERS, SchemaError, ensure_data_directory

logger = logging.getLogger(__name__)

PLOT_HEADERS = ['x', 'y', 'series', 'seed']
FIGURES = ('learning_curve', 'demo_scaling', 'tts', 'ablation', 'warmstart')
CURVE_PHASES = ('pretrain', 'warm_start', 'online')
FINAL_PHASES = ('warm_start', 'online')
WARMSTART_KEY = '@schedule.warm_start_fraction='


class PlotDataBuilder:
    def __init__(self, metrics_files: Sequence):
        if not metrics_files:
            raise SchemaError("no metrics files given")
        self.metrics_files = [Path(p) for p in metrics_files]

    def load_metrics(self) -> pd.DataFrame:
        """全ファイルを読み込み、列構成と設定ハッシュが揃っているか確認"""
        frames = []
        for path in self.metrics_files:
            if not path.exists():
                raise SchemaError(f"metrics file not found: {path}")
            df = pd.read_csv(path)
            if list(df.columns) not in (METRICS_HEADERS, TTS_HEADERS):
                raise SchemaError(f"{path}: not a metrics file (columns {list(df.columns)})")
            frames.append(df)
            logger.info("loaded %d rows from %s", len(df), path)

        columns = {tuple(df.columns) for df in frames}
        if len(columns) > 1:
            raise SchemaError("cannot mix training metrics and test-time scaling metrics")
        df = pd.concat(frames, ignore_index=True)
        hashes = sorted(df['config_hash'].dropna().unique())
        if len(hashes) > 1:
            raise SchemaError(f"metrics files come from different configs: {', '.join(hashes)}")
        return df

    @staticmethod
    def _require(df: pd.DataFrame, headers: List[str], figure: str) -> None:
        if list(df.columns) != headers:
            raise SchemaError(f"figure '{figure}' needs {'tts' if headers == TTS_HEADERS else 'run/bc'} metrics")

    @staticmethod
    def _tidy(x, y, series, seed) -> pd.DataFrame:
        return pd.DataFrame({'x': list(x), 'y': list(y), 'series': list(series), 'seed': list(seed)},
                            columns=PLOT_HEADERS)

    @staticmethod
    def final_rows(df: pd.DataFrame) -> pd.DataFrame:
        """実行・シードごとの最後の評価行"""
        rows = df[df['phase'].isin(FINAL_PHASES) & df['eval_success_rate'].notna()]
        return rows.sort_values(['run_id', 'seed', 'env_steps', 'round']).groupby(['run_id', 'seed']).tail(1)

    def learning_curve(self, df: pd.DataFrame) -> pd.DataFrame:
        rows = df[df['phase'].isin(CURVE_PHASES) & df['eval_success_rate'].notna()]
        rows = rows.sort_values(['variant', 'seed', 'env_steps', 'round'])
        return self._tidy(rows['env_steps'], rows['eval_success_rate'], rows['variant'], rows['seed'])

    def demo_scaling(self, df: pd.DataFrame) -> pd.DataFrame:
        """BCはデモ数ごとの評価、学習実行は最終評価"""
        bc = df[(df['phase'] == 'bc') & df['eval_success_rate'].notna()]
        rows = pd.concat([bc, self.final_rows(df)]).sort_values(['variant', 'demos', 'seed'])
        return self._tidy(rows['demos'], rows['eval_success_rate'], rows['variant'], rows['seed'])

    def ablation(self, df: pd.DataFrame) -> pd.DataFrame:
        rows = self.final_rows(df).sort_values(['variant', 'seed'])
        return self._tidy(rows['variant'], rows['eval_success_rate'], rows['variant'], rows['seed'])

    def warmstart(self, df: pd.DataFrame) -> pd.DataFrame:
        rows = self.final_rows(df)
        rows = rows[rows['variant'].str.contains(WARMSTART_KEY, regex=False)]
        if rows.empty:
            raise SchemaError("no warm start sweep variants in the metrics files")
        fraction = rows['variant'].str.split(WARMSTART_KEY, regex=False).str[1].astype(float)
        rows = rows.assign(fraction=fraction).sort_values(['fraction', 'seed'])
        return self._tidy(rows['fraction'], rows['eval_success_rate'],
                          ['warm_start_fraction'] * len(rows), rows['seed'])

    def tts(self, df: pd.DataFrame) -> pd.DataFrame:
        rows = df.sort_values(['iterations', 'num_samples', 'seed'])
        series = [f'J={j}' for j in rows['iterations']]
        return self._tidy(rows['num_samples'], rows['eval_success_rate'], series, rows['seed'])

    def build(self, figure: str) -> pd.DataFrame:
        if figure not in FIGURES:
            raise SchemaError(f"unknown figure '{figure}' (choose from {', '.join(FIGURES)})")
        df = self.load_metrics()
        self._require(df, TTS_HEADERS if figure == 'tts' else METRICS_HEADERS, figure)
        return getattr(self, figure)(df).reset_index(drop=True)

    def save_plot_data(self, df: pd.DataFrame, out) -> None:
        ensure_data_directory(str(out))
        df.to_csv(out, index=False)
        logger.info("plot data saved: %s (%d rows)", out, len(df))


def emit_plotdata(metrics_files: Sequence, figure: str, out) -> pd.DataFrame:
    builder = PlotDataBuilder(metrics_files)
    df = builder.build(figure)
    builder.save_plot_data(df, out)
    return df
