"""
残差プランナー（MPPI）とMPC実行
"""
