"""Byte-stable artifact container for models, checkpoints, and reports.

Artifacts are JSON documents with deterministic serialization: keys are
sorted, arrays are embedded as base64 little-endian float64 (or int64)
buffers, and writes are atomic. Two runs with identical inputs, config,
and seed therefore produce byte-identical files, which is what the
end-to-end determinism check compares.

Every artifact carries a header with its kind, the config hash, and the
seed, so downstream stages can refuse mismatched inputs.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from typing import Any, Mapping

import numpy as np

from .core import DataError

_ARRAY_TAG = "__array__"
_SUPPORTED_DTYPES = {"float64", "int64"}

FORMAT_VERSION = 1


def encode_array(arr: np.ndarray) -> dict:
    """Embed an array as a JSON-safe dict with a little-endian buffer."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        arr = arr.astype(np.float64)
    dtype = arr.dtype.name
    if dtype not in _SUPPORTED_DTYPES:
        raise DataError(f"cannot embed array of dtype {dtype}")
    buf = np.ascontiguousarray(arr).astype("<" + arr.dtype.str[1:]).tobytes()
    return {
        _ARRAY_TAG: True,
        "dtype": dtype,
        "shape": list(arr.shape),
        "data": base64.b64encode(buf).decode("ascii"),
    }


def decode_array(d: Mapping) -> np.ndarray:
    dtype = d["dtype"]
    if dtype not in _SUPPORTED_DTYPES:
        raise DataError(f"cannot decode array of dtype {dtype}")
    buf = base64.b64decode(d["data"])
    arr = np.frombuffer(buf, dtype="<" + np.dtype(dtype).str[1:])
    return arr.reshape(d["shape"]).astype(dtype)


def _encode_tree(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return encode_array(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _encode_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_tree(v) for v in obj]
    return obj


def _decode_tree(obj: Any) -> Any:
    if isinstance(obj, dict):
        if obj.get(_ARRAY_TAG):
            return decode_array(obj)
        return {k: _decode_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_tree(v) for v in obj]
    return obj


def atomic_write_bytes(path, payload: bytes) -> None:
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_artifact(path, kind: str, payload: Mapping,
                  config_hash: str, seed: int) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config_hash": config_hash,
        "seed": seed,
        "payload": _encode_tree(dict(payload)),
    }
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load_artifact(path, expected_kind: str | None = None) -> dict:
    """Load an artifact; returns the full document with decoded payload."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"artifact not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"artifact {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "kind" not in doc or "payload" not in doc:
        raise DataError(f"artifact {path} lacks the expected structure")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"artifact {path} has format version {doc.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    if expected_kind is not None and doc["kind"] != expected_kind:
        raise DataError(
            f"artifact {path} has kind {doc['kind']!r}, expected {expected_kind!r}"
        )
    doc["payload"] = _decode_tree(doc["payload"])
    return doc
