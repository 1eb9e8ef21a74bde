"""
Logging setup with a rotating log file and an in-memory ring buffer.

The buffer keeps the most recent records so a run can embed the warnings
it produced in its run.json.
"""
import itertools
import logging
import os
from collections import deque
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from typing import Optional, Union

from fedseg.run_clock import configured_timezone

LOG_FORMAT = '%(asctime)s [%(levelname)-8s] %(name)s: %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
LOG_FILE_NAME = 'fedseg.log'
PACKAGE_LOGGERS = ('fedseg', 'fedseg_app')

# ---------------------------------------------------------------------------
# In-memory ring buffer
# ---------------------------------------------------------------------------
_BUFFER_MAX = 2000
_log_buffer = deque(maxlen=_BUFFER_MAX)
_log_id_counter = itertools.count(1)

_LEVELS_ORDERED = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
_LEVEL_VALUES = {name: i for i, name in enumerate(_LEVELS_ORDERED)}


def _passes_level(entry_level, min_level):
    return _LEVEL_VALUES.get(entry_level, 0) >= _LEVEL_VALUES.get(min_level, 0)


def get_logs(min_level='DEBUG', limit=_BUFFER_MAX):
    """Return the newest ``limit`` buffered entries at or above ``min_level``, oldest first."""
    if limit <= 0:
        return []
    recent_entries = deque(maxlen=limit)
    for entry in _log_buffer:
        if _passes_level(entry['level'], min_level):
            recent_entries.append(entry)
    return list(recent_entries)


def clear_logs():
    _log_buffer.clear()


# ---------------------------------------------------------------------------
# Handler and formatter
# ---------------------------------------------------------------------------
class BufferedLogHandler(logging.Handler):
    """Logging handler that appends records to the in-memory ring buffer."""

    def emit(self, record):
        try:
            _log_buffer.append({
                'id': next(_log_id_counter),
                'timestamp': _format_log_timestamp(
                    datetime.fromtimestamp(record.created, tz=timezone.utc)),
                'level': record.levelname,
                'logger': record.name,
                'message': self.format(record),
            })
        except Exception:
            self.handleError(record)


def _format_log_timestamp(dt: Optional[datetime] = None) -> str:
    """Format timestamps in the configured local timezone."""
    if dt is None:
        dt = datetime.now(timezone.utc)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(configured_timezone()).strftime(DATE_FORMAT)


class ConfiguredTimezoneFormatter(logging.Formatter):
    """Logging formatter that renders timestamps in the configured timezone."""

    def formatTime(self, record, datefmt=None):
        dt = datetime.fromtimestamp(record.created, tz=timezone.utc)
        if datefmt:
            return dt.astimezone(configured_timezone()).strftime(datefmt)
        return _format_log_timestamp(dt)


# ---------------------------------------------------------------------------
# Logging setup
# ---------------------------------------------------------------------------
def _resolve_level(level: Union[str, int, None]) -> int:
    if level is None:
        level = os.getenv('FEDSEG_LOG_LEVEL', 'INFO')
    if isinstance(level, int):
        return level
    value = logging.getLevelName(str(level).strip().upper())
    return value if isinstance(value, int) else logging.INFO


def setup_logging(log_dir: Optional[str] = None, level: Union[str, int, None] = None) -> logging.Logger:
    """
    Configure the fedseg loggers.

    Args:
        log_dir: Directory for the rotating log file (FEDSEG_LOG_DIR if None;
            no file when neither is set)
        level: Console level name or number (FEDSEG_LOG_LEVEL, default INFO)

    Returns:
        The application logger
    """
    log_dir = log_dir or os.getenv('FEDSEG_LOG_DIR') or None
    console_level = _resolve_level(level)
    formatter = ConfiguredTimezoneFormatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    handlers = []
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler.setLevel(console_level)
    handlers.append(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, LOG_FILE_NAME),
            maxBytes=5 * 1024 * 1024,
            backupCount=3,
            encoding='utf-8',
        )
        file_handler.setFormatter(formatter)
        file_handler.setLevel(logging.DEBUG)
        handlers.append(file_handler)

    # message only; logger name is a separate field
    buffer_handler = BufferedLogHandler()
    buffer_handler.setFormatter(logging.Formatter('%(message)s'))
    buffer_handler.setLevel(logging.DEBUG)
    handlers.append(buffer_handler)

    for name in PACKAGE_LOGGERS:
        package_logger = logging.getLogger(name)
        for old in list(package_logger.handlers):
            package_logger.removeHandler(old)
            old.close()
        package_logger.setLevel(logging.DEBUG)
        package_logger.propagate = False
        for handler in handlers:
            package_logger.addHandler(handler)

    app_logger = logging.getLogger('fedseg_app')
    app_logger.debug('Logging initialised (buffer=%d, file=%s)', _BUFFER_MAX, log_dir or '-')
    return app_logger
