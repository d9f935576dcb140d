#!/usr/bin/env python3
"""
chunksearch - 実験実行用メインスクリプト

デモ生成、BCベースライン、探索付き学習（アブレーション・スイープ・再開）、
テスト時スケーリング評価、プロット用データの書き出しをコマンドごとに実行します。
"""

import argparse
import os
import sys
from datetime import datetime
from typing import List, Optional

# プロジェクトルートをPythonパスに追加
sys.path.append(os.path.dirname(__file__))

from src.utils.common import ConfigError, get_output_dir, setup_logging


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: '{text}'") from e


def banner(title: str) -> None:
    print("\n" + "="*60)
    print(title)
    print("="*60)


def load_config_from_args(args, extra_overrides: Optional[List[str]] = None):
    from src.expcli.config import load_run_config
    overrides = list(args.set or []) + list(extra_overrides or [])
    return load_run_config(args.config, args.profile, overrides)


def shortcut_overrides(args) -> List[str]:
    """--task / --demos / --budget を --set に読み替える"""
    overrides = []
    if getattr(args, 'task', None):
        overrides.append(f'task.name={args.task}')
    if getattr(args, 'demos', None):
        overrides.append(f'task.demos={args.demos}')
    if getattr(args, 'budget', None):
        overrides.append(f'schedule.budget={args.budget}')
    return overrides


def seeds_from_args(args, config) -> List[int]:
    if args.seeds:
        return args.seeds
    if args.seed is not None:
        return [args.seed]
    return list(config.run.seeds)


def run_demos(args) -> None:
    """エキスパートデモを生成して保存"""
    banner("STEP 1: デモ生成")
    from src.expcli.experiments import make_demos
    config = load_config_from_args(args)
    noise = config.task.demo_noise if args.noise is None else args.noise
    seed = args.seed if args.seed is not None else config.run.seed
    demos = make_demos(args.task, args.count, noise, seed, args.out, config.task.process_noise_std)
    print(f"\n✅ {len(demos)} 本のデモを保存しました: {args.out}")


def run_bc(args) -> None:
    """デモ数ごとのBCベースライン"""
    banner("STEP 1: BCベースライン")
    from src.expcli.experiments import bc_baseline
    config = load_config_from_args(args, shortcut_overrides(args))
    run_dir = bc_baseline(config, seeds_from_args(args, config), args.demo_counts)
    print(f"\n✅ BCベースラインが完了しました: {run_dir}")


def run_training(args) -> None:
    """探索付き学習（アブレーション・スイープ・再開）"""
    from src.expcli.experiments import resume_experiment, run_experiment
    if args.resume:
        banner("STEP 1: 学習の再開")
        run_dir = resume_experiment(args.resume)
        print(f"\n✅ 学習が完了しました: {run_dir}")
        return
    banner("STEP 1: 学習")
    config = load_config_from_args(args, shortcut_overrides(args))
    run_dirs = run_experiment(config, seeds_from_args(args, config), args.ablate, args.sweep)
    print("\n✅ 学習が完了しました")
    for run_dir in run_dirs:
        print(f"  📊 {run_dir / 'summary.json'}")


def run_tts(args) -> None:
    """凍結チェックポイントでのテスト時スケーリング評価"""
    banner("STEP 1: テスト時スケーリング評価")
    from src.expcli.experiments import tts_sweep
    out = tts_sweep(args.checkpoint, args.samples, args.iterations, args.distilled, args.out)
    print(f"\n✅ 評価が完了しました: {out}")


def run_plotdata(args) -> None:
    """プロット用の縦持ちCSVを書き出す"""
    banner("STEP 1: プロット用データ")
    from src.analysis.plotdata import emit_plotdata
    df = emit_plotdata(args.metrics, args.figure, args.out)
    print(f"\n✅ {len(df)} 行を書き出しました: {args.out}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='上書き用の設定ファイル（YAML）')
    common.add_argument('--profile', help='設定プロファイル名（desk, smoke など）')
    common.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='設定値の上書き（例: planner.samples=64）')
    common.add_argument('--seed', type=int, help='シード')
    common.add_argument('--seeds', type=_int_list, help='シードの一覧（例: 0,1,2）')

    parser = argparse.ArgumentParser(
        description='chunksearch - 拡散ポリシー + 世界モデル探索による模倣学習',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  python main.py demos --task point_reach --count 10 --out data/demos/point_reach.csdm
  python main.py bc --profile desk --seeds 0,1,2
  python main.py run --profile desk --task point_reach --demos 5 --budget 20000 --seed 0
  python main.py run --profile desk --ablate no-expert-iteration
  python main.py run --profile desk --sweep schedule.warm_start_fraction=0,0.1,0.2,0.4
  python main.py tts --checkpoint outputs/<run_id>/seed_0
  python main.py plotdata --metrics outputs/<run_id>/metrics.csv --figure learning_curve --out plot.csv
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    demos = sub.add_parser('demos', parents=[common], help='エキスパートデモを生成')
    demos.add_argument('--task', required=True, help='タスク名')
    demos.add_argument('--count', type=int, required=True, help='デモ本数')
    demos.add_argument('--noise', type=float, help='行動摂動ノイズの標準偏差')
    demos.add_argument('--out', required=True, help='出力ファイル')
    demos.set_defaults(func=run_demos)

    for name, func, text in (('bc', run_bc, 'BCベースライン'), ('run', run_training, '探索付き学習')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--task', help='タスク名（task.name の上書き）')
        p.add_argument('--demos', type=int, help='デモ本数（task.demos の上書き）')
        p.add_argument('--budget', type=int, help='環境ステップ数（schedule.budget の上書き）')
        p.set_defaults(func=func)
        if name == 'bc':
            p.add_argument('--demo-counts', type=_int_list, help='デモ数の一覧（例: 5,10,25,50）')
        else:
            p.add_argument('--ablate', help='no-warm-start | no-hybrid-wm | no-expert-iteration')
            p.add_argument('--sweep', help='1つの設定値を振る（例: schedule.warm_start_fraction=0,0.2）')
            p.add_argument('--resume', help='再開する実行ディレクトリ')

    tts = sub.add_parser('tts', parents=[common], help='テスト時スケーリング評価')
    tts.add_argument('--checkpoint', required=True, help='シードまたはラウンドのチェックポイント')
    tts.add_argument('--samples', type=_int_list, help='サンプル数 N の一覧')
    tts.add_argument('--iterations', type=_int_list, help='反復回数 J の一覧')
    tts.add_argument('--distilled', action='store_true', help='蒸留後のベース方策を J=0 で評価')
    tts.add_argument('--out', help='出力CSV')
    tts.set_defaults(func=run_tts)

    plot = sub.add_parser('plotdata', parents=[common], help='プロット用データの書き出し')
    plot.add_argument('--metrics', nargs='+', required=True, help='メトリクスCSV')
    plot.add_argument('--figure', required=True,
                      choices=['learning_curve', 'demo_scaling', 'tts', 'ablation', 'warmstart'])
    plot.add_argument('--out', required=True, help='出力CSV')
    plot.set_defaults(func=run_plotdata)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """メイン処理（終了コード: 0 成功, 2 設定エラー, 1 実行時エラー）"""
    args = build_parser().parse_args(argv)
    setup_logging()

    print("🧭 chunksearch")
    print(f"開始時刻: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"出力先: {get_output_dir()}")

    try:
        args.func(args)
    except ConfigError as e:
        print(f"\n❌ 設定エラー: {e}")
        return 2
    except Exception as e:
        print(f"\n❌ {args.command} でエラーが発生しました: {e}")
        return 1

    print("\n" + "="*60)
    print("🎉 すべての処理が正常に完了しました！")
    print(f"完了時刻: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
