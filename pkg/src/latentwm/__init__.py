"""
潜在世界モデル（RSSM）
"""
