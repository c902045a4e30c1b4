"""
Fork-Join Lab - Result Persistence

This module writes result files so that identical inputs give
byte-identical outputs and an interrupted write never leaves a truncated
file behind.

Features:
- Atomic writes through a temporary file with backup and restore
- CSV with fixed 17-significant-digit float rendering
- JSON with sorted keys and stable float rendering
- SHA-256 checksums for manifests
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
from fractions import Fraction
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_FORMAT = ".17g"


def format_value(value: Any) -> str:
    """Render one CSV cell deterministically; None becomes an empty cell."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, FLOAT_FORMAT)
    if isinstance(value, Fraction):
        return str(value)
    return str(value)


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars, arrays, Fractions and tuples for json.dumps."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, Fraction):
        return str(value)
    return value


def atomic_write(file_path: str, content: str) -> None:
    """
    Write text to a file atomically

    The content goes to `<path>.tmp` first and is renamed over the target.
    An existing target is copied to `<path>.backup` beforehand and restored
    if the write fails; the temporary file is always cleaned up.

    Args:
        file_path: Destination path
        content: Text to write

    Raises:
        ValueError: If the path is empty
        FileNotFoundError: If the parent directory does not exist
        PermissionError: If the parent directory is not writable
        OSError: If the write or rename fails
    """
    if not file_path or not isinstance(file_path, str):
        raise ValueError("Invalid file path")

    directory = os.path.dirname(file_path)
    if directory and not os.path.exists(directory):
        raise FileNotFoundError(f"Directory does not exist: {directory}")
    if directory and not os.access(directory, os.W_OK):
        raise PermissionError(f"No write permission for directory: {directory}")

    backup_path = None
    if os.path.exists(file_path):
        try:
            backup_path = f"{file_path}.backup"
            shutil.copy2(file_path, backup_path)
        except OSError:
            # Backup creation failed, but continue with save
            backup_path = None

    temp_path = f"{file_path}.tmp"
    try:
        with open(temp_path, "w", encoding="utf-8", newline="") as handle:
            handle.write(content)
        os.replace(temp_path, file_path)

        if backup_path and os.path.exists(backup_path):
            try:
                os.remove(backup_path)
            except OSError:
                pass
    except Exception:
        if backup_path and os.path.exists(backup_path):
            try:
                shutil.copy2(backup_path, file_path)
                os.remove(backup_path)
            except OSError:
                pass
        if os.path.exists(temp_path):
            try:
                os.remove(temp_path)
            except OSError:
                pass
        raise
    logger.debug("wrote %s (%d bytes)", file_path, len(content.encode("utf-8")))


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        writer.writerow([format_value(cell) for cell in row])
    return buffer.getvalue()


def write_csv(file_path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    atomic_write(file_path, render_csv(header, rows))


def read_csv(file_path: str) -> List[Dict[str, str]]:
    """Read a CSV written by write_csv into a list of string dictionaries."""
    with open(file_path, "r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def render_json(document: Any) -> str:
    return json.dumps(to_jsonable(document), sort_keys=True, indent=2) + "\n"


def write_json(file_path: str, document: Any) -> None:
    atomic_write(file_path, render_json(document))


def read_json(file_path: str) -> Any:
    with open(file_path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def sha256_file(file_path: str) -> str:
    digest = hashlib.sha256()
    with open(file_path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()
