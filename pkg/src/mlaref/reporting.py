"""Output writers: delimited tables, JSON reports, and run manifests.

Every data file a command produces is traceable: CSV/JSONL tables get a
``<name>.manifest.json`` sidecar, JSON reports embed the same manifest under
a ``manifest`` key. The manifest records the command, the fully resolved
config snapshot, the seed, tool and schema versions, and a timestamp.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = "1"


def _tool_version() -> str:
    from . import __version__

    return __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = field(default_factory=_tool_version)
    schema_version: str = SCHEMA_VERSION
    timestamp: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "schema_version": self.schema_version,
            "timestamp": self.timestamp,
        }
        if self.extra:
            d["extra"] = self.extra
        return d


def write_rows(path: Path, rows: list[dict], fmt: str, manifest: RunManifest) -> Path:
    """Write a table as .csv or .jsonl (column order = first row's key order)
    plus its manifest sidecar. Returns the data file path actually written."""
    path = Path(path)
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"format must be csv or jsonl, got {fmt!r}")
    path = path.with_suffix(".csv" if fmt == "csv" else ".jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        if rows:
            fieldnames = list(rows[0].keys())
            with open(path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=fieldnames)
                writer.writeheader()
                writer.writerows(rows)
        else:
            path.write_text("")
    else:
        with open(path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
    write_manifest_sidecar(path, manifest)
    return path


def write_manifest_sidecar(data_path: Path, manifest: RunManifest) -> Path:
    sidecar = Path(str(data_path) + ".manifest.json")
    sidecar.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return sidecar


def write_json_report(path: Path, payload: dict, manifest: RunManifest) -> Path:
    """JSON report with the manifest embedded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    body["manifest"] = manifest.to_dict()
    path.write_text(json.dumps(body, indent=2) + "\n")
    return path
