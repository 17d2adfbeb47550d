import logging

from log_system import AdvancedLogFilter, LogManager


def make_record(name="experiment_runner", level=logging.INFO, message="step 1/2 loss=0.5"):
    return logging.LogRecord(name, level, __file__, 1, message, None, None)


class TestFilter:
    def test_passes_by_default(self):
        assert AdvancedLogFilter().filter(make_record())

    def test_disabled_logger(self):
        log_filter = AdvancedLogFilter()
        log_filter.disable_logger("experiment_runner")
        assert not log_filter.filter(make_record())
        assert log_filter.filter(make_record(name="rectified_flow"))

    def test_keyword_is_case_insensitive(self):
        log_filter = AdvancedLogFilter()
        log_filter.disable_keyword("LOSS")
        assert not log_filter.filter(make_record())
        assert log_filter.filter(make_record(message="检查点已写入"))

    def test_per_logger_level(self):
        log_filter = AdvancedLogFilter()
        log_filter.set_logger_level("experiment_runner", logging.INFO)
        assert not log_filter.filter(make_record(level=logging.DEBUG))
        assert log_filter.filter(make_record(name="rectified_flow", level=logging.DEBUG))

    def test_status(self):
        log_filter = AdvancedLogFilter()
        log_filter.disable_keyword("nan")
        log_filter.set_logger_level("tensor_core", logging.WARNING)
        status = log_filter.get_status()
        assert status["disabled_keywords"] == ["nan"]
        assert status["logger_levels"] == {"tensor_core": "WARNING"}


class TestLogManager:
    def test_setup_creates_files(self, tmp_path, restore_root_logger):
        manager = LogManager(str(tmp_path / "logs"))
        manager.setup_logging(debug_mode=True)
        logging.getLogger("experiment_runner").error("训练在第 3 步发散")
        for handler in restore_root_logger.handlers:
            handler.flush()
        assert (tmp_path / "logs" / "riftcast.log").exists()
        error_log = (tmp_path / "logs" / "error.log").read_text(encoding="utf-8")
        assert "训练在第 3 步发散" in error_log
        assert len(restore_root_logger.handlers) == 3

    def test_repeated_setup_does_not_duplicate_handlers(self, tmp_path, restore_root_logger):
        manager = LogManager(str(tmp_path / "logs"))
        manager.setup_logging()
        manager.setup_logging()
        assert len(restore_root_logger.handlers) == 3
        assert restore_root_logger.level == logging.INFO

    def test_training_progress_switch(self, tmp_path):
        manager = LogManager(str(tmp_path))
        assert manager.is_training_progress_enabled()
        manager.set_training_progress(False)
        assert not manager.log_filter.filter(make_record(level=logging.DEBUG))
        assert manager.log_filter.filter(make_record(level=logging.INFO))
        assert manager.get_log_status()["training_progress"] == "禁用"
        manager.set_training_progress(True)
        assert manager.log_filter.filter(make_record(level=logging.DEBUG))
        assert manager.get_log_status()["training_progress"] == "启用"

    def test_mute_keyword(self, tmp_path):
        manager = LogManager(str(tmp_path))
        assert manager.mute_keyword("grad_norm")
        assert not manager.mute_keyword("grad_norm")
        assert not manager.log_filter.filter(make_record(message="step 3 grad_norm=1.2"))
        assert manager.get_log_status()["disabled_keywords"] == ["grad_norm"]

    def test_format_log_status(self, tmp_path):
        manager = LogManager(str(tmp_path))
        manager.mute_keyword("nan")
        text = manager.format_log_status()
        assert "屏蔽关键词: nan" in text
        assert "没有日志文件" in text

    def test_logs_info(self, tmp_path):
        manager = LogManager(str(tmp_path / "missing"))
        assert manager.get_logs_info() == "日志目录不存在"
        (tmp_path / "riftcast.log").write_text("x", encoding="utf-8")
        assert "riftcast.log" in LogManager(str(tmp_path)).get_logs_info()
