"""
学習ループ・リプレイ・評価
"""
