"""Run log (JSON lines) and logging setup."""

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

LOGGER_NAME = "scorefuse"


class RunLog:
    """Appends one JSON object per event to ``<out>/run.log.jsonl``."""

    def __init__(self, path: Path, config_hash: str, seed: int):
        self.path = path
        self.config_hash = config_hash
        self.seed = seed
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def event(self, name: str, **fields) -> dict:
        record = {
            "ts": datetime.now(timezone.utc).isoformat(),
            "event": name,
            "config_hash": self.config_hash,
            "seed": self.seed,
            **fields,
        }
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True, default=str) + "\n")
        return record

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


class RunLogHandler(logging.Handler):
    """Mirrors library warnings into the run log."""

    def __init__(self, runlog: RunLog, level: int = logging.WARNING):
        super().__init__(level)
        self.runlog = runlog

    def emit(self, record: logging.LogRecord) -> None:
        try:
            self.runlog.event("warning", logger=record.name, message=record.getMessage())
        except OSError:
            self.handleError(record)


def setup_logging(verbose: bool = False, console: Optional[Console] = None) -> logging.Logger:
    """Install a RichHandler on the package logger (idempotent)."""
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        handler = RichHandler(console=console or Console(stderr=True), show_path=False, markup=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
    for handler in logger.handlers:
        if isinstance(handler, RichHandler):
            handler.setLevel(logging.DEBUG if verbose else logging.WARNING)
    return logger


def attach_runlog(runlog: RunLog) -> RunLogHandler:
    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        if isinstance(handler, RunLogHandler):
            logger.removeHandler(handler)
    handler = RunLogHandler(runlog)
    logger.addHandler(handler)
    return handler
