"""
報酬モデルとクリティック
"""
