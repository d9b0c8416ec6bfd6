import logging
import sys

from logger import setup_logger


class TestLogger:
    """Test logger handler setup"""

    def test_console_goes_to_stderr(self):
        """Test: console output uses stderr so stdout carries only command output"""
        log = setup_logger("mixcam.console_check")
        consoles = [
            h for h in log.handlers
            if isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
        ]
        assert len(consoles) == 1
        assert consoles[0].stream is sys.stderr
        assert consoles[0].level == logging.INFO

    def test_handlers_attach_once(self):
        """Test: repeated setup does not duplicate handlers"""
        first = setup_logger("mixcam.once_check")
        count = len(first.handlers)
        assert setup_logger("mixcam.once_check") is first
        assert len(first.handlers) == count == 2
