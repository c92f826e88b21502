"""Tests for logging configuration."""

import logging
from pathlib import Path


class TestSetupLogging:
    """Test logging setup functionality."""

    def test_setup_logging_returns_logger(self):
        """setup_logging returns the package logger."""
        from bottlecheck.logging_config import setup_logging

        logger = setup_logging(debug=False)

        assert isinstance(logger, logging.Logger)
        assert logger.name == "bottlecheck"

    def test_setup_logging_sets_debug_level_when_debug_true(self):
        """setup_logging sets DEBUG level when debug=True."""
        from bottlecheck.logging_config import setup_logging

        logger = setup_logging(debug=True)

        assert logger.level == logging.DEBUG

    def test_setup_logging_sets_info_level_when_debug_false(self):
        """setup_logging sets INFO level when debug=False."""
        from bottlecheck.logging_config import setup_logging

        logger = setup_logging(debug=False)

        assert logger.level == logging.INFO

    def test_console_handler_level_matches_debug_setting(self):
        """Console handler level is DEBUG when debug=True, WARNING otherwise."""
        from bottlecheck.logging_config import setup_logging

        logger_debug = setup_logging(debug=True)
        assert logger_debug.handlers[0].level == logging.DEBUG

        logger_normal = setup_logging(debug=False)
        assert logger_normal.handlers[0].level == logging.WARNING

    def test_no_file_handler_without_log_file(self):
        """Only the console handler exists when no log file is given."""
        from bottlecheck.logging_config import setup_logging

        logger = setup_logging(debug=False)

        file_handlers = [h for h in logger.handlers if isinstance(h, logging.FileHandler)]
        assert file_handlers == []

    def test_writes_to_log_file(self, tmp_path: Path):
        """Records reach the log file, creating its directory."""
        from bottlecheck.logging_config import setup_logging

        log_file = tmp_path / "out" / "bottlecheck.log"
        logger = setup_logging(debug=False, log_file=log_file)
        logging.getLogger("bottlecheck.ensemble").info("accepted member")
        for handler in logger.handlers:
            handler.flush()

        assert "accepted member" in log_file.read_text()

    def test_reinitialization_does_not_duplicate_handlers(self, tmp_path: Path):
        """Calling setup twice leaves one console and one file handler."""
        from bottlecheck.logging_config import setup_logging

        setup_logging(log_file=tmp_path / "a.log")
        logger = setup_logging(log_file=tmp_path / "a.log")

        assert len(logger.handlers) == 2
