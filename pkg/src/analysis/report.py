"""
実行サマリーのMarkdownレポート
"""

import logging
import math
from datetime import datetime
from typing import Dict, Optional

import pandas as pd

logger = logging.getLogger(__name__)


def _fmt(value: Optional[float], digits: int = 3) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return '-'
    return f"{value:.{digits}f}"


def generate_summary_report(summary: Dict, df: pd.DataFrame, report_path=None) -> str:
    """サマリーレポートを生成"""
    evaluated = df[df['eval_success_rate'].notna()]
    report = f"""
# chunksearch Run Report
Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}

## Run
- Run ID: {summary['run_id']}
- Config Hash: {summary['config_hash']}
- Task: {summary['task']}
- Variant: {summary['variant']}
- Seeds: {', '.join(str(s) for s in summary['seeds'])}
- Evaluation Points: {len(evaluated):,}
- Final Env Steps: {int(df['env_steps'].max()) if not df.empty else 0:,}

## Final Success Rate
- Mean: {_fmt(summary['success_rate_mean'])} (standard error {_fmt(summary['success_rate_stderr'])})
"""
    for seed, rate in summary['final_success_rate'].items():
        report += f"- Seed {seed}: {_fmt(rate, 2)}\n"

    if 'distilled_success_rate_mean' in summary:
        report += "\n## Distilled Base Policy\n"
        report += (f"- Mean: {_fmt(summary['distilled_success_rate_mean'])} "
                   f"(standard error {_fmt(summary['distilled_success_rate_stderr'])})\n")

    pretrain = evaluated[evaluated['phase'] == 'pretrain']
    if not pretrain.empty:
        report += "\n## Base Policy Before Search\n"
        report += f"- Mean: {_fmt(pretrain['eval_success_rate'].mean())}\n"

    if summary.get('rm_separation'):
        report += "\n## Reward Model Separation\n"
        for seed, stats in summary['rm_separation'].items():
            report += (f"- Seed {seed}: expert {_fmt(stats['expert_mean_score'])}, "
                       f"failed {_fmt(stats['learner_mean_score'])}, "
                       f"accuracy {_fmt(stats['threshold_accuracy'], 2)}, AUC {_fmt(stats['auc'], 2)}\n")

    if report_path is not None:
        with open(report_path, 'w', encoding='utf-8') as f:
            f.write(report)
        logger.info("summary report saved: %s", report_path)
    return report
