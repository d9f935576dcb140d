"""
chunksearch - ソースコードパッケージ
"""
