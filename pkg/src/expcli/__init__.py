"""
実験設定・実行・メトリクス
"""
