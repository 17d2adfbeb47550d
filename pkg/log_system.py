import os
import time
import logging
import logging.handlers
from typing import Any, Dict, Set


RIFTCAST_LOGGERS = [
    '__main__',
    'main',
    'config_manager',
    'experiment_runner',
    'field_data',
    'ajit_model',
    'rectified_flow',
    'rollout_metrics',
    'tensor_core',
    'system_monitor'
]


class AdvancedLogFilter(logging.Filter):
    """高级日志过滤器"""

    def __init__(self):
        super().__init__()
        self.disabled_loggers: Set[str] = set()
        self.disabled_keywords: Set[str] = set()

        self.logger_levels: Dict[str, int] = {}

    def filter(self, record: logging.LogRecord) -> bool:
        """过滤日志记录"""
        if record.name in self.disabled_loggers:
            return False

        if record.name in self.logger_levels and record.levelno < self.logger_levels[record.name]:
            return False

        message = record.getMessage().lower()
        for keyword in self.disabled_keywords:
            if keyword.lower() in message:
                return False
        return True

    def disable_logger(self, logger_name: str):
        self.disabled_loggers.add(logger_name)

    def disable_keyword(self, keyword: str):
        self.disabled_keywords.add(keyword)

    def set_logger_level(self, logger_name: str, level: int):
        """设置特定logger的最小级别"""
        self.logger_levels[logger_name] = level

    def is_logger_disabled(self, logger_name: str) -> bool:
        return logger_name in self.disabled_loggers

    def is_keyword_disabled(self, keyword: str) -> bool:
        return keyword in self.disabled_keywords

    def get_status(self) -> dict:
        """获取过滤器状态"""
        return {
            'disabled_loggers': sorted(self.disabled_loggers),
            'disabled_keywords': sorted(self.disabled_keywords),
            'logger_levels': {k: logging.getLevelName(v) for k, v in self.logger_levels.items()}
        }


class LogManager:
    """统一的日志管理器"""

    def __init__(self, log_dir: str = "logs"):
        self.log_dir = log_dir
        self.log_filter = AdvancedLogFilter()
        self.logger = logging.getLogger(__name__)
        self._setup_default_filters()

    def _setup_default_filters(self):
        """默认屏蔽第三方库的噪音日志"""
        for logger_name in ['matplotlib', 'PIL']:
            self.log_filter.disable_logger(logger_name)

    def setup_logging(self, debug_mode: bool = False, log_dir: str = None):
        """
        配置根 logger: 主日志 (按大小轮转)、错误日志、控制台

        Args:
            debug_mode: True 时输出 DEBUG 级别 (含逐步训练进度)
            log_dir: 覆盖构造时的日志目录
        """
        if log_dir:
            self.log_dir = log_dir
        os.makedirs(self.log_dir, exist_ok=True)

        root_logger = logging.getLogger()
        root_logger.setLevel(logging.DEBUG if debug_mode else logging.INFO)

        for handler in root_logger.handlers[:]:
            root_logger.removeHandler(handler)

        main_handler = logging.handlers.RotatingFileHandler(
            os.path.join(self.log_dir, 'riftcast.log'),
            maxBytes=10 * 1024 * 1024,
            backupCount=5,
            encoding='utf-8'
        )
        main_handler.setLevel(logging.DEBUG)
        main_handler.addFilter(self.log_filter)

        error_handler = logging.handlers.RotatingFileHandler(
            os.path.join(self.log_dir, 'error.log'),
            maxBytes=5 * 1024 * 1024,
            backupCount=3,
            encoding='utf-8'
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.addFilter(self.log_filter)

        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.DEBUG if debug_mode else logging.INFO)
        console_handler.addFilter(self.log_filter)

        detailed_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'
        )
        simple_formatter = logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s'
        )

        main_handler.setFormatter(detailed_formatter)
        error_handler.setFormatter(detailed_formatter)
        console_handler.setFormatter(simple_formatter)

        root_logger.addHandler(main_handler)
        root_logger.addHandler(error_handler)
        root_logger.addHandler(console_handler)

        self.logger.info("日志系统初始化完成")

    def set_training_progress(self, enabled: bool):
        """开关逐步训练进度 (experiment_runner 的 DEBUG 日志)"""
        if enabled:
            self.log_filter.logger_levels.pop('experiment_runner', None)
        else:
            self.log_filter.set_logger_level('experiment_runner', logging.INFO)
        self.logger.debug(f"逐步训练日志: {'启用' if enabled else '禁用'}")

    def is_training_progress_enabled(self) -> bool:
        return self.log_filter.logger_levels.get('experiment_runner') != logging.INFO

    def mute_keyword(self, keyword: str) -> bool:
        """禁用包含指定关键词的日志"""
        if self.log_filter.is_keyword_disabled(keyword):
            return False
        self.log_filter.disable_keyword(keyword)
        self.logger.info(f"已禁用包含 '{keyword}' 的日志")
        return True

    def get_log_status(self) -> Dict[str, Any]:
        """获取日志状态信息"""
        filter_status = self.log_filter.get_status()
        all_disabled = all(self.log_filter.is_logger_disabled(name) for name in RIFTCAST_LOGGERS)
        return {
            'riftcast_log': "禁用" if all_disabled else "启用",
            'training_progress': "启用" if self.is_training_progress_enabled() else "禁用",
            'disabled_keywords': filter_status['disabled_keywords'],
            'disabled_loggers': filter_status['disabled_loggers'],
            'root_level': logging.getLevelName(logging.getLogger().level)
        }

    def format_log_status(self) -> str:
        """日志状态与日志文件信息的多行文本"""
        status = self.get_log_status()
        lines = ["\n【日志配置】"]
        lines.append(f"  日志目录: {self.log_dir}")
        lines.append(f"  根级别: {status['root_level']}")
        lines.append(f"  逐步训练日志: {status['training_progress']}")
        lines.append(f"  屏蔽关键词: {', '.join(status['disabled_keywords']) or '无'}")
        lines.append(f"  屏蔽 logger: {', '.join(status['disabled_loggers']) or '无'}")
        lines.append(self.get_logs_info())
        return "\n".join(lines)

    def get_logs_info(self) -> str:
        """获取日志文件信息"""
        if not os.path.exists(self.log_dir):
            return "日志目录不存在"

        lines = ["日志文件信息:", "=" * 50]
        files_found = False
        for file in sorted(os.listdir(self.log_dir)):
            if file.endswith('.log'):
                files_found = True
                file_path = os.path.join(self.log_dir, file)
                size = os.path.getsize(file_path)
                mtime = time.strftime('%Y-%m-%d %H:%M:%S', time.localtime(os.path.getmtime(file_path)))
                if size > 1024 * 1024:
                    size_str = f"{size / (1024 * 1024):.2f} MB"
                elif size > 1024:
                    size_str = f"{size / 1024:.2f} KB"
                else:
                    size_str = f"{size} B"
                lines.append(f"{file:20} {size_str:>10}  修改: {mtime}")

        if not files_found:
            lines.append("没有日志文件")
        lines.append("=" * 50)
        return "\n".join(lines)
