"""
expcli / analysis: 設定・メトリクス・実験実行・プロット用データ・CLI
"""

import json
import math
import shutil

import numpy as np
import pandas as pd
import pytest

from main import main
from src.analysis.plotdata import PLOT_HEADERS, PlotDataBuilder, emit_plotdata
from src.envkit.demos import collect_demos
from src.expcli.config import (apply_ablation, config_hash, dump_config, load_dumped_config, load_run_config,
                               parse_override, run_id, variant_name, with_updates)
from src.expcli.experiments import (bc_baseline, parse_sweep, resolve_checkpoint, resolve_variants,
                                    resume_experiment, run_experiment, subset, tts_sweep)
from src.expcli.metrics import MetricsWriter, load_summary, mean_and_stderr, read_metrics, tts_writer
from src.tensorcore.checkpoint import load_store
from src.utils.common import METRICS_HEADERS, TTS_HEADERS, CheckpointError, ConfigError, SchemaError


def metrics_rows(run: str, hash_value: str, variant: str, seeds=(0,), demos: int = 5, phases=None):
    phases = phases or [('pretrain', 0, 0, 0.1), ('warm_start', 0, 100, 0.2), ('online', 1, 200, 0.5)]
    rows = []
    for seed in seeds:
        for phase, round_index, env_steps, rate in phases:
            rows.append({'run_id': run, 'config_hash': hash_value, 'seed': seed, 'task': 'point_reach',
                         'variant': variant, 'demos': demos, 'round': round_index, 'phase': phase,
                         'env_steps': env_steps, 'eval_success_rate': rate, 'eval_episodes': 10,
                         'distilled': 0})
    return rows


def write_metrics(path, rows):
    writer = MetricsWriter(path)
    writer.append(rows)
    return path


# ---- 設定 ----

def test_parse_override_nests_keys():
    assert parse_override('planner.samples=64') == {'planner': {'samples': 64}}
    assert parse_override('ablation.hybrid_wm=false') == {'ablation': {'hybrid_wm': False}}
    assert parse_override('run.seeds=[0, 1]') == {'run': {'seeds': [0, 1]}}
    with pytest.raises(ConfigError):
        parse_override('planner.samples')


def test_profile_and_overrides(smoke_config):
    assert smoke_config.task.name == 'point_reach'
    assert smoke_config.policy.chunk == 4
    assert smoke_config.planner.samples == 16
    assert smoke_config.planner.mode == 'sample'
    assert smoke_config.evaluation.planner_mode == 'mean'
    config = load_run_config(profile='smoke', overrides=['planner.samples=32'])
    assert config.planner.samples == 32
    assert config.planner.top_k == 4


def test_invalid_configs_raise_config_error():
    with pytest.raises(ConfigError):
        load_run_config(profile='smoke', overrides=['planner.bogus=1'])
    with pytest.raises(ConfigError):
        load_run_config(profile='smoke', overrides=['planner.top_k=64'])
    with pytest.raises(ConfigError):
        load_run_config(profile='nonexistent')
    with pytest.raises(ConfigError):
        load_run_config(config_file='config/missing.yaml')


def test_config_hash_is_stable(smoke_config):
    again = load_run_config(profile='smoke')
    assert config_hash(smoke_config) == config_hash(again)
    assert len(run_id(smoke_config)) == 16
    changed = with_updates(smoke_config, 'planner.samples=32')
    assert config_hash(changed) != config_hash(smoke_config)


def test_ablations_and_variant_names(smoke_config):
    assert variant_name(smoke_config) == 'full'
    assert variant_name(apply_ablation(smoke_config, 'no-warm-start')) == 'no-warm-start'
    assert apply_ablation(smoke_config, 'no-hybrid-wm').ablation.hybrid_wm is False
    both = apply_ablation(apply_ablation(smoke_config, 'no-hybrid-wm'), 'no-expert-iteration')
    assert variant_name(both) == 'no-hybrid-wm+no-expert-iteration'
    assert apply_ablation(smoke_config, None) is smoke_config
    with pytest.raises(ConfigError):
        apply_ablation(smoke_config, 'no-critic')


def test_sweep_variants(smoke_config):
    assert parse_sweep('schedule.warm_start_fraction=0, 0.2') == ('schedule.warm_start_fraction', ['0', '0.2'])
    with pytest.raises(ConfigError):
        parse_sweep('schedule.warm_start_fraction=')
    variants = resolve_variants(smoke_config, sweep='schedule.warm_start_fraction=0,0.2')
    assert [name for _, name in variants] == ['no-warm-start@schedule.warm_start_fraction=0',
                                              'full@schedule.warm_start_fraction=0.2']
    assert variants[1][0].schedule.warm_start_fraction == 0.2


def test_dumped_config_round_trip(tmp_path, smoke_config):
    path = tmp_path / 'config.yaml'
    dump_config(smoke_config, path)
    loaded = load_dumped_config(path)
    assert loaded == smoke_config
    assert config_hash(loaded) == config_hash(smoke_config)
    with pytest.raises(ConfigError):
        load_dumped_config(tmp_path / 'nothing.yaml')


def test_subset_takes_leading_demos():
    demos = collect_demos('point_reach', 3, noise_std=0.05, seed=0)
    assert [t.traj_id for t in subset(demos, 2)] == [0, 1]
    with pytest.raises(ConfigError):
        subset(demos, 4)


# ---- メトリクス ----

def test_mean_and_stderr():
    mean, stderr = mean_and_stderr([1.0, 3.0])
    assert mean == 2.0
    assert stderr == pytest.approx(1.0)
    assert mean_and_stderr([0.4]) == (0.4, 0.0)
    assert all(math.isnan(v) for v in mean_and_stderr([]))


def test_metrics_writer_drop_after(tmp_path):
    rows = [dict(row, round=r) for r in range(3)
            for row in metrics_rows('r1', 'h', 'full', seeds=(0, 1), phases=[('online', 0, 10, 0.5)])]
    writer = MetricsWriter(tmp_path / 'metrics.csv')
    writer.append(rows)
    writer.drop_after(0, 1)
    df = writer.read()
    assert list(df.columns) == METRICS_HEADERS
    assert sorted(df[df['seed'] == 0]['round']) == [0, 1]
    assert sorted(df[df['seed'] == 1]['round']) == [0, 1, 2]
    writer.reset()
    assert not writer.path.exists()


def test_read_metrics_checks_columns(tmp_path):
    path = tmp_path / 'other.csv'
    pd.DataFrame({'a': [1]}).to_csv(path, index=False)
    with pytest.raises(SchemaError):
        read_metrics(path)
    with pytest.raises(SchemaError):
        read_metrics(tmp_path / 'missing.csv')


def test_load_summary_checks_version(tmp_path):
    path = tmp_path / 'summary.json'
    path.write_text(json.dumps({'schema_version': 99}), encoding='utf-8')
    with pytest.raises(SchemaError):
        load_summary(path)


# ---- プロット用データ ----

def test_learning_curve_rows(tmp_path):
    path = write_metrics(tmp_path / 'm.csv', metrics_rows('r1', 'h', 'full', seeds=(0, 1)))
    df = emit_plotdata([path], 'learning_curve', tmp_path / 'plot.csv')
    assert list(df.columns) == PLOT_HEADERS
    assert len(df) == 6
    assert list(df[df['seed'] == 0]['x']) == [0, 100, 200]
    assert (tmp_path / 'plot.csv').exists()


def test_demo_scaling_and_ablation(tmp_path):
    bc = metrics_rows('bc-1', 'h', 'bc', phases=[('bc', 0, 0, 0.3)], demos=2) + \
        metrics_rows('bc-1', 'h', 'bc', phases=[('bc', 0, 0, 0.4)], demos=3)
    full = metrics_rows('r1', 'h', 'full', demos=3)
    ablated = metrics_rows('r2', 'h', 'no-hybrid-wm', demos=3, phases=[('online', 1, 200, 0.25)])
    files = [write_metrics(tmp_path / 'bc.csv', bc), write_metrics(tmp_path / 'full.csv', full),
             write_metrics(tmp_path / 'ablated.csv', ablated)]
    scaling = PlotDataBuilder(files).build('demo_scaling')
    assert list(scaling['series']) == ['bc', 'bc', 'full', 'no-hybrid-wm']
    assert list(scaling['y']) == [0.3, 0.4, 0.5, 0.25]
    ablation = PlotDataBuilder(files[1:]).build('ablation')
    assert list(ablation['x']) == ['full', 'no-hybrid-wm']


def test_warmstart_sweep_rows(tmp_path):
    rows = []
    for fraction, rate in (('0.2', 0.6), ('0', 0.3)):
        variant = f"{'no-warm-start' if fraction == '0' else 'full'}@schedule.warm_start_fraction={fraction}"
        rows += metrics_rows(f'r{fraction}', 'h', variant, phases=[('online', 1, 200, rate)])
    df = PlotDataBuilder([write_metrics(tmp_path / 'm.csv', rows)]).build('warmstart')
    assert list(df['x']) == [0.0, 0.2]
    assert list(df['y']) == [0.3, 0.6]


def test_plotdata_rejects_mixed_inputs(tmp_path):
    first = write_metrics(tmp_path / 'a.csv', metrics_rows('r1', 'hash-a', 'full'))
    second = write_metrics(tmp_path / 'b.csv', metrics_rows('r2', 'hash-b', 'full'))
    with pytest.raises(SchemaError):
        PlotDataBuilder([first, second]).build('learning_curve')

    tts = tts_writer(tmp_path / 'tts.csv')
    tts.append([{'run_id': 'r1', 'config_hash': 'hash-a', 'seed': 0, 'task': 'point_reach', 'variant': 'full',
                 'num_samples': 8, 'iterations': 1, 'eval_success_rate': 0.5, 'eval_episodes': 2}])
    with pytest.raises(SchemaError):
        PlotDataBuilder([first, tts.path]).build('tts')
    with pytest.raises(SchemaError):
        PlotDataBuilder([tts.path]).build('learning_curve')
    with pytest.raises(SchemaError):
        PlotDataBuilder([first]).build('scatter')
    assert list(PlotDataBuilder([tts.path]).build('tts')['series']) == ['J=1']


# ---- CLI ----

def test_cli_config_error_exit_code(output_dir):
    assert main(['run', '--profile', 'smoke', '--set', 'planner.bogus=1']) == 2


def test_cli_runtime_error_exit_code(tmp_path, output_dir):
    path = write_metrics(tmp_path / 'm.csv', metrics_rows('r1', 'h', 'full'))
    assert main(['plotdata', '--metrics', str(path), '--figure', 'tts', '--out', str(tmp_path / 'p.csv')]) == 1
    assert main(['plotdata', '--metrics', str(path), '--figure', 'learning_curve',
                 '--out', str(tmp_path / 'p.csv')]) == 0


def test_cli_demos_command(tmp_path, output_dir):
    out = tmp_path / 'demos.csdm'
    assert main(['demos', '--task', 'point_reach', '--count', '2', '--out', str(out), '--seed', '3']) == 0
    assert out.exists()


# ---- 実験の実行 ----

def test_bc_baseline_writes_rows_per_demo_count(tiny_config, output_dir):
    run_dir = bc_baseline(tiny_config, seeds=[0], demo_counts=[2, 3])
    assert run_dir.name == f'bc-{run_id(tiny_config)}'
    df = read_metrics(run_dir / 'metrics.csv')
    assert list(df['demos']) == [2, 3]
    assert set(df['phase']) == {'bc'}
    summary = json.loads((run_dir / 'summary.json').read_text(encoding='utf-8'))
    assert set(summary['demo_counts']) == {'2', '3'}


def test_smoke_run_end_to_end(tiny_config, output_dir):
    (run_dir,) = run_experiment(tiny_config, seeds=[0])
    assert run_dir.parent == output_dir
    assert run_dir.name == run_id(tiny_config)
    for name in ('metrics.csv', 'summary.json', 'report.md', 'config.yaml', 'run.json'):
        assert (run_dir / name).exists(), name
    assert (run_dir / 'seed_0' / 'final' / 'agent.json').exists()
    assert (run_dir / 'seed_0' / 'round_000' / 'state.json').exists()
    assert (run_dir / 'seed_0' / 'round_002' / 'state.json').exists()

    df = read_metrics(run_dir / 'metrics.csv')
    assert list(df['phase']) == ['pretrain', 'warm_start', 'online', 'online']
    assert list(df['env_steps']) == [0, 40, 120, 200]
    assert set(df['config_hash']) == {config_hash(tiny_config)}
    assert df['eval_success_rate'].notna().all()
    assert df['distilled'].tolist()[-2:] == [1, 1]

    summary = load_summary(run_dir / 'summary.json')
    assert summary['seeds'] == [0]
    assert summary['success_rate_stderr'] == 0.0
    assert summary['variant'] == 'full'

    curve = emit_plotdata([run_dir / 'metrics.csv'], 'learning_curve', output_dir / 'curve.csv')
    assert len(curve) == 4

    tts_path = tts_sweep(run_dir / 'seed_0', samples=[8], iterations=[0, 1])
    tts = read_metrics(tts_path, TTS_HEADERS)
    assert list(tts['iterations']) == [0, 1]
    assert set(tts['config_hash']) == {config_hash(tiny_config)}

    resume_experiment(run_dir)
    assert len(read_metrics(run_dir / 'metrics.csv')) == 4


def test_resumed_run_matches_uninterrupted_run(tiny_config, output_dir):
    (run_dir,) = run_experiment(tiny_config, seeds=[0])
    metrics_path = run_dir / 'metrics.csv'
    expected = read_metrics(metrics_path)
    assert expected['round'].max() == 2

    seed_dir = run_dir / 'seed_0'
    shutil.rmtree(seed_dir / 'round_002')
    shutil.rmtree(seed_dir / 'final')
    MetricsWriter(metrics_path).drop_after(0, 1)
    assert read_metrics(metrics_path)['round'].max() == 1

    resume_experiment(run_dir)
    assert (seed_dir / 'final' / 'agent.json').exists()
    pd.testing.assert_frame_equal(read_metrics(metrics_path), expected, check_dtype=False)


def test_posthoc_distillation_keeps_undistilled_checkpoint(tiny_config, output_dir):
    config = with_updates(tiny_config, 'schedule.posthoc_distillation=true')
    (run_dir,) = run_experiment(config, seeds=[0])
    seed_dir = run_dir / 'seed_0'
    assert resolve_checkpoint(seed_dir) == seed_dir / 'final'
    assert resolve_checkpoint(seed_dir, distilled=True) == seed_dir / 'final_distilled'

    final = load_store(seed_dir / 'final' / 'policy')
    last_round = load_store(seed_dir / 'round_002' / 'policy')
    distilled = load_store(seed_dir / 'final_distilled' / 'policy')
    for key in final:
        np.testing.assert_array_equal(final[key], last_round[key])
    assert any(not np.array_equal(final[key], distilled[key]) for key in final)

    df = read_metrics(run_dir / 'metrics.csv')
    assert df['phase'].iloc[-1] == 'posthoc'
    assert df['env_steps'].iloc[-1] == 200

    tts = read_metrics(tts_sweep(seed_dir, distilled=True), TTS_HEADERS)
    assert set(tts['variant']) == {'full+distilled'}
    assert list(tts['iterations']) == [0]


def test_distilled_sweep_needs_distilled_checkpoint(tiny_config, output_dir):
    (run_dir,) = run_experiment(tiny_config, seeds=[0])
    with pytest.raises(CheckpointError):
        tts_sweep(run_dir / 'seed_0', distilled=True)
