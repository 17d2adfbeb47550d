import sys
import time
import logging
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional

import psutil


@dataclass
class RunStats:
    """一次运行的主机信息与各阶段耗时 (秒)"""
    host: Dict[str, Any] = field(default_factory=dict)
    phases: Dict[str, float] = field(default_factory=dict)
    peak_rss: int = 0


class SystemMonitor:
    """运行期资源与阶段计时"""

    def __init__(self, logger: Optional[logging.Logger] = None):
        self.logger = logger or logging.getLogger(__name__)
        self.platform_type = platform.system()
        self.phases: Dict[str, float] = {}
        self.peak_rss = 0
        try:
            self._process = psutil.Process()
        except Exception as e:
            self._process = None
            self.logger.warning(f"初始化进程监控失败: {e}")

    def get_host_info(self) -> Dict[str, Any]:
        """CPU 数、内存总量、平台、Python 版本"""
        try:
            memory_total = psutil.virtual_memory().total
        except Exception as e:
            self.logger.debug(f"获取内存信息失败: {e}")
            memory_total = 0
        return {
            "cpu_count": psutil.cpu_count() or 0,
            "memory_total": memory_total,
            "platform": f"{self.platform_type} {platform.release()}",
            "python": sys.version.split()[0]
        }

    def _sample_rss(self) -> int:
        if self._process is None:
            return 0
        try:
            rss = self._process.memory_info().rss
        except Exception:
            return 0
        self.peak_rss = max(self.peak_rss, rss)
        return rss

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        """记录一个阶段的墙钟耗时; 同名阶段累加"""
        start = time.perf_counter()
        self.logger.debug(f"阶段开始: {name}")
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.phases[name] = self.phases.get(name, 0.0) + elapsed
            rss = self._sample_rss()
            self.logger.info(f"阶段 {name} 耗时 {elapsed:.2f}秒, 内存 {self.format_bytes(rss)}")

    def snapshot(self) -> RunStats:
        self._sample_rss()
        return RunStats(host=self.get_host_info(), phases=dict(self.phases), peak_rss=self.peak_rss)

    def format_bytes(self, bytes_value: float) -> str:
        """格式化字节数为可读格式"""
        for unit in ['B', 'KB', 'MB', 'GB', 'TB']:
            if bytes_value < 1024.0:
                return f"{bytes_value:.2f} {unit}"
            bytes_value /= 1024.0
        return f"{bytes_value:.2f} PB"

    def format_run_stats(self, stats: RunStats) -> str:
        """格式化运行统计为多行文本"""
        lines = ["=" * 60, "运行统计", "=" * 60]
        host = stats.host
        lines.append(f"  平台: {host.get('platform', '未知')} / Python {host.get('python', '未知')}")
        lines.append(f"  CPU 核心数: {host.get('cpu_count', 0)}")
        lines.append(f"  内存总量: {self.format_bytes(host.get('memory_total', 0))}")
        lines.append(f"  峰值常驻内存: {self.format_bytes(stats.peak_rss)}")
        if stats.phases:
            lines.append("\n【阶段耗时】")
            for name, seconds in stats.phases.items():
                lines.append(f"  {name}: {seconds:.2f}秒")
        lines.append("=" * 60)
        return "\n".join(lines)
