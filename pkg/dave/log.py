"""Tagged console logging: every line reads ``[TAG] message``."""

from __future__ import annotations

import logging
import sys

_FORMAT = "[%(name)s] %(message)s"
_configured = False


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    global _configured
    level = logging.DEBUG if verbose else (logging.WARNING if quiet else logging.INFO)
    root = logging.getLogger()
    if not _configured:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(handler)
        _configured = True
    root.setLevel(level)


def get_logger(tag: str) -> logging.Logger:
    return logging.getLogger(tag.upper())


def progress_enabled(quiet: bool = False) -> bool:
    return not quiet and sys.stderr.isatty()
