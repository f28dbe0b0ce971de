# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Machine-readable run reports (JSON and CSV)."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import typing as t
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from lipcert._version import VERSION

CSV_COLUMNS = ("model", "method", "norm", "value", "runtime_seconds")
"""Fixed CSV column order."""

VOLATILE_FIELDS = frozenset({"timestamp", "runtime_seconds"})
"""Fields that change between otherwise identical runs."""


def _plain(value: t.Any) -> t.Any:
    """Convert to JSON-compatible values; NaN and infinities become ``None``."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def strip_volatile(data: t.Any) -> t.Any:
    """Drop timestamps and runtimes from a report dictionary, recursively."""
    if isinstance(data, dict):
        return {k: strip_volatile(v) for k, v in data.items() if k not in VOLATILE_FIELDS}
    if isinstance(data, list):
        return [strip_volatile(v) for v in data]
    return data


@dataclass
class RunReport:
    """Report of one CLI run.

    ``results`` holds dictionaries produced by ``BoundReport.to_dict``,
    ``Certificate.to_dict`` or the QC check. Those with a ``method`` and a ``value`` become
    CSV rows.
    """

    model_path: str | None
    command: str
    options: dict[str, t.Any] = field(default_factory=dict)
    results: list[dict[str, t.Any]] = field(default_factory=list)
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )
    version: str = VERSION

    def to_dict(self) -> dict[str, t.Any]:
        return _plain(
            {
                "model_path": self.model_path,
                "command": self.command,
                "options": self.options,
                "results": self.results,
                "timestamp": self.timestamp,
                "version": self.version,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def rows(self) -> list[dict[str, t.Any]]:
        model = Path(self.model_path).stem if self.model_path else ""
        rows = []
        for result in self.to_dict()["results"]:
            if "method" not in result or "value" not in result:
                continue
            row = {column: result.get(column) for column in CSV_COLUMNS}
            row["model"] = result.get("model", model)
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
        return buffer.getvalue()

    def write(self, path: str | Path) -> Path:
        """Write the report; the format follows the suffix (``.csv`` or JSON otherwise)."""
        path = Path(path)
        text = self.to_csv() if path.suffix.lower() == ".csv" else self.to_json()
        path.write_text(text, encoding="utf-8")
        return path
