"""Stream report document: canonical JSON with a schema version key.

Serialization is byte-deterministic for a fixed run (sorted keys, native
float repr).  Wall-clock time is kept on the in-memory object for console
summaries but deliberately left out of the document so that identical runs
produce identical bytes.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataFormatError

SCHEMA_VERSION = 1


@dataclass
class StreamReport:
    config: dict
    segments: list
    batches: list
    aggregate: dict
    diagnostics: dict
    class_stats: dict | None = None
    schema_version: int = SCHEMA_VERSION
    wall_clock_seconds: float | None = field(default=None, compare=False)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def report_to_document(report):
    """The serialized form: everything except wall-clock, canonically ordered."""
    return {
        "schema_version": report.schema_version,
        "config": _jsonify(report.config),
        "segments": _jsonify(report.segments),
        "batches": _jsonify(report.batches),
        "aggregate": _jsonify(report.aggregate),
        "diagnostics": _jsonify(report.diagnostics),
        "class_stats": _jsonify(report.class_stats),
    }


def dumps_canonical(payload):
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_document(payload, path):
    """Atomic whole-file write of a canonical JSON document."""
    text = dumps_canonical(payload)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report(report, path):
    write_document(report_to_document(report), path)


def read_document(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read document {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid report document {path}: {exc}") from exc
