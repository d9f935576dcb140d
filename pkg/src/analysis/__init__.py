"""
メトリクスの集計・レポート
"""
