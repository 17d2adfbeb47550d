"""riftcast 启动脚本: python start.py <子命令> [选项]"""
import sys
import os

# 允许从任意工作目录启动
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from main import run

if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
