"""
共通ユーティリティパッケージ
"""
