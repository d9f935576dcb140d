"""
実験の実行: デモ生成・BCベースライン・学習（アブレーション/スイープ/再開）・テスト時スケーリング
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src.analysis.report import generate_summary_report
from src.envkit.demos import DemoSet, collect_demos, load_demos, save_demos
from src.envkit.tasks import TaskSpec, get_task
from src.expcli.config import (RunConfig, apply_ablation, config_hash, dump_config, load_dumped_config,
                               run_id, variant_name, with_updates)
from src.expcli.metrics import (MetricsWriter, build_summary, mean_and_stderr, metrics_row, rm_trace_rows,
                                rm_trace_writer, save_summary, tts_row, tts_writer)
from src.orchestrator.agent import SearchAgent
from src.orchestrator.evaluation import EvalResult, evaluate
from src.orchestrator.phases import (PhaseReport, PhaseSchedule, evaluate_agent, latest_checkpoint,
                                     posthoc_distillation, train_agent)
from src.utils.common import CheckpointError, ConfigError, ensure_data_directory, get_output_dir

logger = logging.getLogger(__name__)

# 保持デモ（報酬モデルの分離度評価用）のシードずらし
HELD_OUT_SEED_OFFSET = 7919

FINAL_DIR = 'final'
DISTILLED_DIR = 'final_distilled'


@dataclass
class RunContext:
    """1つの実行ディレクトリ（バリアント単位）の情報"""
    config: RunConfig
    run_dir: Path
    run_id: str
    base_hash: str
    variant: str
    seeds: List[int]

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / 'metrics.csv'

    def seed_dir(self, seed: int) -> Path:
        return self.run_dir / f'seed_{seed}'

    def save_meta(self) -> None:
        dump_config(self.config, self.run_dir / 'config.yaml')
        meta = {'run_id': self.run_id, 'config_hash': self.base_hash, 'variant': self.variant,
                'task': self.config.task.name, 'seeds': self.seeds}
        ensure_data_directory(str(self.run_dir / 'run.json'))
        with open(self.run_dir / 'run.json', 'w', encoding='utf-8') as f:
            json.dump(meta, f, indent=2)

    @classmethod
    def load(cls, run_dir) -> 'RunContext':
        run_dir = Path(run_dir)
        meta_path = run_dir / 'run.json'
        if not meta_path.exists():
            raise CheckpointError(f"not a run directory (run.json missing): {run_dir}")
        with open(meta_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        config = load_dumped_config(run_dir / 'config.yaml')
        return cls(config, run_dir, meta['run_id'], meta['config_hash'], meta['variant'], meta['seeds'])


# ---- デモ ----

def subset(demos: DemoSet, n: int) -> DemoSet:
    """先頭 n 本（デモ数の比較で入れ子の集合を使う）"""
    if n > len(demos):
        raise ConfigError(f"task.demos={n} but only {len(demos)} demonstrations available")
    return DemoSet(demos.task_name, demos.d_o, demos.d_a, demos.horizon, demos.trajectories[:n])


def prepare_demos(config: RunConfig, task: TaskSpec, seed: int, count: Optional[int] = None) -> DemoSet:
    """デモファイルがあれば読み込み、なければエキスパートで収集"""
    count = count or config.task.demos
    if config.task.demo_file:
        demos = load_demos(config.task.demo_file)
        if demos.task_name != task.name:
            raise ConfigError(f"task.demo_file holds '{demos.task_name}' demos, config task is '{task.name}'")
        return subset(demos, count)
    return collect_demos(task, count, config.task.demo_noise, seed,
                         process_noise_std=config.task.process_noise_std)


def make_demos(task_name: str, count: int, noise_std: float, seed: int, out,
               process_noise_std: Optional[float] = None) -> DemoSet:
    demos = collect_demos(get_task(task_name), count, noise_std, seed, process_noise_std=process_noise_std)
    save_demos(out, demos)
    logger.info("saved %d demos to %s", len(demos), out)
    return demos


# ---- 学習 ----

def parse_sweep(sweep: str) -> Tuple[str, List[str]]:
    """'section.key=v1,v2,...' を (key, [v1, v2, ...]) に分解"""
    if '=' not in sweep:
        raise ConfigError(f"sweep must look like section.key=v1,v2: '{sweep}'")
    key, values = sweep.split('=', 1)
    values = [v.strip() for v in values.split(',') if v.strip()]
    if not values:
        raise ConfigError(f"sweep '{sweep}' has no values")
    return key.strip(), values


def resolve_variants(config: RunConfig, ablation: Optional[str] = None,
                     sweep: Optional[str] = None) -> List[Tuple[RunConfig, str]]:
    """アブレーション・スイープを適用した (設定, バリアント名) の一覧"""
    config = apply_ablation(config, ablation)
    if not sweep:
        return [(config, variant_name(config))]
    key, values = parse_sweep(sweep)
    variants = []
    for value in values:
        swept = with_updates(config, f'{key}={value}')
        variants.append((swept, f'{variant_name(swept)}@{key}={value}'))
    return variants


def _seed_finished(config: RunConfig, seed_dir: Path) -> bool:
    if not (seed_dir / FINAL_DIR / 'agent.json').exists():
        return False
    return not config.schedule.posthoc_distillation or (seed_dir / DISTILLED_DIR / 'agent.json').exists()


def _run_seed(ctx: RunContext, seed: int, resume: bool) -> Optional[Dict[str, float]]:
    """1シード分の学習を実行し、報酬モデルの分離度を返す"""
    config = ctx.config
    seed_dir = ctx.seed_dir(seed)
    separation_path = seed_dir / 'separation.json'
    if resume and _seed_finished(config, seed_dir):
        logger.info("seed %d already finished, skipping", seed)
        if separation_path.exists():
            with open(separation_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        return None

    task = get_task(config.task.name)
    demos = prepare_demos(config, task, seed)
    agent = SearchAgent(config, task, seed)
    writer = MetricsWriter(ctx.metrics_path)
    traces = rm_trace_writer(ctx.run_dir / 'rm_traces.csv')
    resume_from = latest_checkpoint(seed_dir) if resume and seed_dir.exists() else None

    def on_round(report: PhaseReport, result: Optional[EvalResult]) -> None:
        writer.append([metrics_row(ctx.run_id, ctx.base_hash, seed, task.name, ctx.variant, len(demos),
                                   report, result)])
        if result is not None and result.rm_traces:
            traces.append(rm_trace_rows(ctx.run_id, seed, report.round_index, result.rm_traces))
        sr = f"{result.success_rate:.2f}" if result is not None else '-'
        logger.info("[%s seed %d] %s round %d: env_steps=%d SR=%s", ctx.variant, seed, report.phase,
                    report.round_index, report.env_steps, sr)

    if resume_from is None:
        # 途中までの行があれば捨ててやり直す
        writer.drop_after(seed, -1)
        traces.drop_after(seed, -1)
        loss = agent.pretrain_policy(demos)
        on_round(PhaseReport('pretrain', 0, 0, {'bc_loss': loss}), evaluate_agent(agent, use_planner=False))
    else:
        state_path = resume_from / 'state.json'
        with open(state_path, 'r', encoding='utf-8') as f:
            last_round = json.load(f)['round']
        writer.drop_after(seed, last_round)
        traces.drop_after(seed, last_round)

    schedule = PhaseSchedule.from_config(config)
    buffer = train_agent(agent, demos, schedule, on_round, checkpoint_dir=seed_dir,
                         config_hash=config_hash(config), resume_from=resume_from)
    agent.save(seed_dir / FINAL_DIR)
    if config.schedule.posthoc_distillation:
        if posthoc_distillation(agent, demos, buffer, schedule, on_round) is not None:
            agent.save(seed_dir / DISTILLED_DIR)

    held_out = collect_demos(task, config.task.demos, config.task.demo_noise, seed + HELD_OUT_SEED_OFFSET,
                             process_noise_std=config.task.process_noise_std)
    separation = agent.rm_separation(held_out, buffer.trajectories)
    if separation is not None:
        ensure_data_directory(str(separation_path))
        with open(separation_path, 'w', encoding='utf-8') as f:
            json.dump(separation, f, indent=2)
    return separation


def _finish(ctx: RunContext, separations: Dict[int, Dict[str, float]]) -> Dict:
    df = MetricsWriter(ctx.metrics_path).read()
    df = df[df['run_id'] == ctx.run_id]
    summary = build_summary(ctx.run_id, ctx.base_hash, ctx.config.task.name, ctx.variant, df, separations)
    save_summary(ctx.run_dir / 'summary.json', summary)
    generate_summary_report(summary, df, ctx.run_dir / 'report.md')
    return summary


def run_context(ctx: RunContext, resume: bool = False) -> Dict:
    ctx.save_meta()
    separations = {}
    for seed in ctx.seeds:
        separation = _run_seed(ctx, seed, resume)
        if separation is not None:
            separations[seed] = separation
    return _finish(ctx, separations)


def run_experiment(config: RunConfig, seeds: Optional[Sequence[int]] = None, ablation: Optional[str] = None,
                   sweep: Optional[str] = None, output_dir=None) -> List[Path]:
    """バリアントごとに実行ディレクトリを作り、全シードを学習・評価する"""
    output_dir = Path(output_dir) if output_dir is not None else get_output_dir()
    seeds = list(seeds) if seeds else list(config.run.seeds)
    base_hash = config_hash(config)
    run_dirs = []
    for variant_config, variant in resolve_variants(config, ablation, sweep):
        rid = run_id(variant_config)
        ctx = RunContext(variant_config, output_dir / rid, rid, base_hash, variant, seeds)
        logger.info("run %s (%s) on %s, seeds %s", rid, variant, variant_config.task.name, seeds)
        run_context(ctx)
        run_dirs.append(ctx.run_dir)
    return run_dirs


def resume_experiment(run_dir) -> Path:
    """最新のラウンドチェックポイントから続きを実行"""
    ctx = RunContext.load(run_dir)
    logger.info("resuming %s (%s)", ctx.run_id, ctx.variant)
    run_context(ctx, resume=True)
    return ctx.run_dir


# ---- BCベースライン ----

def bc_baseline(config: RunConfig, seeds: Optional[Sequence[int]] = None,
                demo_counts: Optional[Sequence[int]] = None, output_dir=None) -> Path:
    """デモ数ごとにベース方策だけを学習・評価する（run と同じ列構成）"""
    output_dir = Path(output_dir) if output_dir is not None else get_output_dir()
    seeds = list(seeds) if seeds else list(config.run.seeds)
    demo_counts = sorted(demo_counts or config.bc.demo_counts)
    task = get_task(config.task.name)
    rid = f'bc-{run_id(config)}'
    run_dir = output_dir / rid
    dump_config(config, run_dir / 'config.yaml')
    writer = MetricsWriter(run_dir / 'metrics.csv')
    writer.reset()
    base_hash = config_hash(config)

    rates: Dict[int, Dict[int, float]] = {n: {} for n in demo_counts}
    for seed in seeds:
        all_demos = prepare_demos(config, task, seed, count=max(demo_counts))
        for n in demo_counts:
            agent = SearchAgent(config, task, seed)
            loss = agent.pretrain_policy(subset(all_demos, n))
            result = evaluate_agent(agent, use_planner=False)
            report = PhaseReport('bc', 0, 0, {'bc_loss': loss})
            writer.append([metrics_row(rid, base_hash, seed, task.name, 'bc', n, report, result)])
            rates[n][seed] = result.success_rate
            logger.info("BC seed %d with %d demos: SR=%.2f", seed, n, result.success_rate)

    summary = {'schema_version': 1, 'run_id': rid, 'config_hash': base_hash, 'task': task.name,
               'variant': 'bc', 'seeds': seeds, 'demo_counts': {}}
    for n, per_seed in rates.items():
        mean, stderr = mean_and_stderr(list(per_seed.values()))
        summary['demo_counts'][str(n)] = {'final_success_rate': {str(s): r for s, r in per_seed.items()},
                                          'success_rate_mean': mean, 'success_rate_stderr': stderr}
    save_summary(run_dir / 'summary.json', summary)
    return run_dir


# ---- テスト時スケーリング ----

def resolve_checkpoint(path, distilled: bool = False) -> Path:
    """シードディレクトリなら final（distilled なら final_distilled）、なければ最新ラウンド"""
    path = Path(path)
    if (path / 'agent.json').exists():
        return path
    if distilled:
        if not (path / DISTILLED_DIR / 'agent.json').exists():
            raise CheckpointError(f"no distilled checkpoint in {path}")
        return path / DISTILLED_DIR
    if (path / FINAL_DIR / 'agent.json').exists():
        return path / FINAL_DIR
    found = latest_checkpoint(path) if path.exists() else None
    if found is None:
        raise CheckpointError(f"no checkpoint found at {path}")
    return found


def _find_run_dir(checkpoint: Path) -> Path:
    for parent in [checkpoint, *checkpoint.parents]:
        if (parent / 'run.json').exists():
            return parent
    raise CheckpointError(f"{checkpoint} is not inside a run directory")


def tts_sweep(checkpoint, samples: Optional[Sequence[int]] = None, iterations: Optional[Sequence[int]] = None,
              distilled: bool = False, out=None) -> Path:
    """凍結したスタックを (N, J) の格子で評価する。学習はしない"""
    checkpoint = resolve_checkpoint(checkpoint, distilled)
    ctx = RunContext.load(_find_run_dir(checkpoint))
    config = ctx.config
    with open(checkpoint / 'agent.json', 'r', encoding='utf-8') as f:
        seed = int(json.load(f)['seed'])
    task = get_task(config.task.name)
    agent = SearchAgent(config, task, seed)
    agent.load(checkpoint)

    variant = ctx.variant
    if distilled:
        if not config.schedule.posthoc_distillation:
            raise ConfigError("--distilled needs a run trained with schedule.posthoc_distillation=true")
        samples, iterations, variant = [config.planner.samples], [0], f'{variant}+distilled'
    samples = list(samples or config.tts.samples)
    iterations = list(config.tts.iterations if iterations is None else iterations)

    out = Path(out) if out is not None else ctx.run_dir / ('tts_distilled.csv' if distilled else 'tts.csv')
    writer = tts_writer(out)
    writer.reset()
    for n in samples:
        planner = config.planner.model_copy(update={'mode': config.evaluation.planner_mode, 'samples': n,
                                                    'top_k': min(config.planner.top_k, n)})
        stack = agent.stack(planner)
        for j in iterations:
            result = evaluate(stack, task, config.evaluation.episodes, config.evaluation.seed_offset,
                              use_planner=True, iterations=j, samples=n,
                              process_noise_std=config.task.process_noise_std)
            writer.append([tts_row(ctx.run_id, ctx.base_hash, seed, task.name, variant, n, j, result)])
            logger.info("TTS N=%d J=%d: SR=%.2f", n, j, result.success_rate)
    return out

