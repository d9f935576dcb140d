#!/usr/bin/env python3
"""
簡単実行用スクリプト（smoke プロファイルで学習を1回実行）
"""

import subprocess
import sys
import os

def main():
    """簡単実行"""
    print("chunksearch を smoke プロファイルで実行します...")

    # main.pyを実行
    try:
        subprocess.run([sys.executable, 'main.py', 'run', '--profile', 'smoke', *sys.argv[1:]],
                       cwd=os.path.dirname(os.path.abspath(__file__)),
                       check=True)
        print("実行完了!")
    except subprocess.CalledProcessError as e:
        print(f"実行エラー: {e}")
        sys.exit(e.returncode)

if __name__ == "__main__":
    main()
