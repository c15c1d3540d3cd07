"""Run-directory artifacts: metrics CSV stream, JSON reports, manifests."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

METRIC_COLUMNS = [
    "iteration",
    "meta_speaker_loss", "meta_listener_loss",
    "interactive_speaker_loss", "interactive_listener_loss",
    "supervised_speaker_loss", "supervised_listener_loss",
    "val_accuracy", "buffer_speakers", "buffer_listeners",
]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Streams one CSV row per outer iteration (RFC 4180 line endings)."""

    def __init__(self, path, config_hash: str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(f"# config_hash={config_hash}\r\n")
        self._writer = csv.writer(self._fh, lineterminator="\r\n")
        self._writer.writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_metrics_csv(path, rows, config_hash: str) -> None:
    w = MetricsWriter(path, config_hash)
    for row in rows:
        w.write(row)
    w.close()


def write_json(path, obj, config_hash: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if config_hash is not None and isinstance(obj, dict):
        obj = {"config_hash": config_hash, **obj}
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=False)
        f.write("\n")


def atomic_write_json(path, obj) -> None:
    """Write-then-rename so readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def write_table_csv(path, columns, rows, config_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\r\n")
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c) if isinstance(row, dict) else row[i])
                             for i, c in enumerate(columns)])
