"""
The StructuredLogger class provides a singleton logger that writes one structured
line per event to stderr: timestamp, level, event text and key=value fields.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import logging
import sys
from typing import Any


class StructuredLogger:
    """
    The StructuredLogger class provides a singleton logger that writes structured
    key=value lines to stderr. Metrics never go through it; they are written to files.

    Attributes:
        instance (StructuredLogger): Singleton instance of the StructuredLogger class.

    Methods:
        __new__(cls, name: str = "HybridODE", level: str = logging.INFO) -> 'StructuredLogger':
            Creates a new instance of the StructuredLogger class or returns the existing instance.

        initialize_logger(self, name: str, level: str) -> None:
            Initializes the logger with the given name and log level and attaches a stderr handler.

        set_log_level(self, level: str) -> None:
            Sets the log level for the logger and all its handlers.

        format_fields(fields: dict) -> str:
            Renders keyword fields as space separated key=value pairs.

        debug/info/warning/error/critical(self, msg: str, **fields) -> None:
            Logs an event with the given level and optional key=value fields.
    """
    # Create a singleton instance variable
    instance = None

    def __new__(cls, name: str = "HybridODE", level: str = logging.INFO) -> 'StructuredLogger':
        """
        Creating a new structured logger class based on a given logging name
        and its logging level/verbosity.

        Args:
            name (str): The application name that is being used for the logger.
            level (str): The log level defined as a string (e.g.: INFO).

        Returns:
            StructuredLogger: The structured logger object.
        """
        # Check if instance already exists, otherwise create a new one
        if cls.instance is None:
            cls.instance = super(StructuredLogger, cls).__new__(cls)
            cls.instance.initialize_logger(name, level)
        return cls.instance

    def initialize_logger(self, name: str, level: str) -> None:
        """
        Initializing the structured logger class based on a given logging name
        and its logging level/verbosity.

        Args:
            name (str): The application name that is being used for the logger.
            level (str): The log level defined as a string (e.g.: INFO).
        """
        self.logger = logging.getLogger(name)
        self.logger.setLevel(level)
        self.logger.propagate = False

        handler = logging.StreamHandler(sys.stderr)
        handler.setLevel(level)
        formatter = logging.Formatter('%(asctime)s level=%(levelname)s event=%(message)s')
        handler.setFormatter(formatter)
        self.logger.addHandler(handler)

    def set_log_level(self, level: str) -> None:
        """
        Modifies and sets the log level on the given log level.

        Args:
            level (str): The log level defined as a string (e.g.: INFO).
        """
        self.logger.setLevel(level)

        for handler in self.logger.handlers:
            handler.setLevel(level)

        self.logger.debug("Set to debug level")

    @staticmethod
    def format_fields(fields: dict) -> str:
        """
        Renders keyword fields as key=value pairs. Values containing spaces are quoted.
        """
        parts = []
        for key, value in fields.items():
            text = f"{value:.6g}" if isinstance(value, float) else str(value)
            if " " in text:
                text = f'"{text}"'
            parts.append(f"{key}={text}")
        return " ".join(parts)

    def _emit(self, level: int, msg: str, fields: dict) -> None:
        if not self.logger.isEnabledFor(level):
            return
        if fields:
            msg = f"{msg} {self.format_fields(fields)}"
        self.logger.log(level, msg)

    def debug(self, msg: str, **fields: Any) -> None:
        """
        Logger out for messages of type: DEBUG
        """
        self._emit(logging.DEBUG, msg, fields)

    def info(self, msg: str, **fields: Any) -> None:
        """
        Logger out for messages of type: INFO
        """
        self._emit(logging.INFO, msg, fields)

    def warning(self, msg: str, **fields: Any) -> None:
        """
        Logger out for messages of type: WARNING
        """
        self._emit(logging.WARNING, msg, fields)

    def error(self, msg: str, **fields: Any) -> None:
        """
        Logger out for messages of type: ERROR
        """
        self._emit(logging.ERROR, msg, fields)

    def critical(self, msg: str, **fields: Any) -> None:
        """
        Logger out for messages of type: CRITICAL
        """
        self._emit(logging.CRITICAL, msg, fields)
