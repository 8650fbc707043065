"""Dataset binary format.

Little-endian: magic "TTAD", version u32, flags u32 (bit0 = labels present),
n u32, dim u32, classes u32, features as f32 row-major, labels as u32, then a
length-prefixed UTF-8 JSON metadata block.  Features round-trip through the
documented f32 cast; labels are exact.
"""

import json
import os
import struct
import tempfile

import numpy as np

from ..errors import DataFormatError
from .benchmark import Dataset

MAGIC = b"TTAD"
VERSION = 1
FLAG_LABELS = 1


def save_dataset(dataset, path):
    feats = np.asarray(dataset.features, dtype=np.float64)
    n, dim = feats.shape
    flags = FLAG_LABELS if dataset.labels is not None else 0
    classes = int(dataset.metadata.get("num_classes", 0))

    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIIII", VERSION, flags, n, dim, classes)
    out += feats.astype("<f4").tobytes()
    if dataset.labels is not None:
        labels = np.asarray(dataset.labels)
        if labels.shape[0] != n:
            raise DataFormatError("labels length does not match feature rows")
        out += labels.astype("<u4").tobytes()
    meta = json.dumps(dataset.metadata, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta))
    out += meta

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".ttad")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(out))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _take(buf, offset, count, what):
    end = offset + count
    if end > len(buf):
        raise DataFormatError(f"truncated dataset while reading {what}", offset=offset)
    return buf[offset:end], end


def load_dataset(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset {path}: {exc}") from exc
    off = 0
    magic, off = _take(buf, off, 4, "magic")
    if magic != MAGIC:
        raise DataFormatError(f"bad dataset magic {magic!r}", offset=0)
    header, off = _take(buf, off, 20, "header")
    version, flags, n, dim, classes = struct.unpack("<IIIII", header)
    if version != VERSION:
        raise DataFormatError(f"unsupported dataset version {version}", offset=4)
    if n == 0 or dim == 0:
        raise DataFormatError("empty dataset", offset=12)

    raw, off = _take(buf, off, 4 * n * dim, "features")
    features = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, dim)
    labels = None
    if flags & FLAG_LABELS:
        raw, off = _take(buf, off, 4 * n, "labels")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    raw, off = _take(buf, off, 4, "metadata length")
    (meta_len,) = struct.unpack("<I", raw)
    raw, off = _take(buf, off, meta_len, "metadata")
    try:
        metadata = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"bad metadata block: {exc}", offset=off - meta_len)
    if off != len(buf):
        raise DataFormatError(
            f"{len(buf) - off} trailing bytes after dataset payload", offset=off)
    metadata.setdefault("num_classes", classes)
    return Dataset(features=features, labels=labels, metadata=metadata)
