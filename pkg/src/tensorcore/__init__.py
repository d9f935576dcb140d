"""
自動微分テープ・層・最適化・チェックポイント
"""
