"""
igct-lab - Errors & Diagnostic Log
==================================
Exception types shared by every module, and the append-only error log that
training writes when a run aborts.

Exit codes (mapped by main.py):
- 0: success
- 2: configuration error
- 3: numeric divergence (non-finite loss or gradient)
- 4: checkpoint schema mismatch

Usage:
    from errors import DivergenceError, log_error

    log_error(output_dir, "NON_FINITE_LOSS", "loss_gct is nan", {"k": 1200})
    raise DivergenceError("loss_gct is nan", details={"k": 1200})
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

logger = logging.getLogger("ERRORS")

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGENCE = 3
EXIT_SCHEMA_MISMATCH = 4

ERROR_LOG_NAME = "error_log.jsonl"


class LabError(Exception):
    """Base error; carries the process exit code and a details dict."""
    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigError(LabError):
    """Invalid run configuration. The message names the offending field."""
    exit_code = EXIT_CONFIG_ERROR


class DivergenceError(LabError):
    """Non-finite loss or gradient during training."""
    exit_code = EXIT_DIVERGENCE


class SchemaMismatchError(LabError):
    """Checkpoint written by an incompatible schema version."""
    exit_code = EXIT_SCHEMA_MISMATCH


def log_error(output_dir, error_type: str, error_message: str, context: Optional[Dict] = None) -> Optional[Path]:
    """
    Append an error record to <output_dir>/error_log.jsonl

    Never raises: a failure to write the log is itself only logged.

    Args:
        output_dir: Run output directory
        error_type: Short machine-readable tag (e.g. "NON_FINITE_LOSS")
        error_message: Human-readable message (truncated)
        context: Extra JSON-serializable fields (truncated once serialized)

    Returns:
        Path of the log file, or None if writing failed
    """
    from config import ERROR_MESSAGE_MAX_LENGTH, ERROR_CONTEXT_MAX_LENGTH

    try:
        path = Path(output_dir) / ERROR_LOG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "error_type": error_type,
            "error_message": error_message[:ERROR_MESSAGE_MAX_LENGTH] if error_message else None,
            "context": json.dumps(context, sort_keys=True)[:ERROR_CONTEXT_MAX_LENGTH] if context else None,
        }
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return path
    except Exception as e:
        logger.error(f"Failed to write error log: {e}")
        return None
