"""
タスク環境・エキスパート・デモファイル
"""
