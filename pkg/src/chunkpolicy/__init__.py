"""
拡散ポリシー（行動チャンク）
"""
