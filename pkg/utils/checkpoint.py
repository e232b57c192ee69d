"""
JSON checkpoint containers.

Layout (all checkpoint kinds)::

    {
      "format": "<kind tag>",
      "version": 1,
      "fingerprint": "<sha256 hex over the payload arrays>",
      ... kind-specific metadata ...,
      "arrays": {"<name>": {"shape": [rows, cols], "data": [row-major float64 values]}}
    }

Floats are written with Python's shortest round-trip repr and keys are
sorted, so saving the same parameters twice yields byte-identical files.
"""
import hashlib
import json
from pathlib import Path

import numpy as np

from utils.errors import CheckpointError

CONTAINER_VERSION = 1


def fingerprint_arrays(named_arrays, tag=""):
    """SHA-256 over names, shapes and little-endian float64 bytes, in the given order"""
    digest = hashlib.sha256(tag.encode("utf-8"))
    for name, array in named_arrays:
        array = np.ascontiguousarray(array, dtype="<f8")
        digest.update(name.encode("utf-8"))
        digest.update(repr(array.shape).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def encode_array(array):
    array = np.asarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "data": [float(v) for v in array.ravel()]}


def decode_array(payload):
    try:
        shape = tuple(int(s) for s in payload["shape"])
        data = np.asarray(payload["data"], dtype=np.float64)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed array payload: {e}")


def write_container(path, kind, arrays, metadata=None):
    """
    Write named arrays plus metadata; returns the payload fingerprint.

    ``arrays`` is an ordered list of (name, array) pairs; the order defines
    the fingerprint.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fingerprint = fingerprint_arrays(arrays, tag=kind)
    document = dict(metadata or {})
    document.update({
        "format": kind,
        "version": CONTAINER_VERSION,
        "fingerprint": fingerprint,
        "array_order": [name for name, _ in arrays],
        "arrays": {name: encode_array(array) for name, array in arrays},
    })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, sort_keys=True, indent=1)
        f.write("\n")
    return fingerprint


def read_container(path, kind):
    """
    Load a container and verify its tag, version and fingerprint.

    Returns:
    - (ordered list of (name, array), metadata dict)
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({e})")

    if document.get("format") != kind:
        raise CheckpointError(f"{path}: expected format {kind!r}, found {document.get('format')!r}")
    if document.get("version") != CONTAINER_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {document.get('version')!r}")
    order = document.get("array_order", [])
    try:
        arrays = [(name, decode_array(document["arrays"][name])) for name in order]
    except KeyError as e:
        raise CheckpointError(f"{path}: array {e} listed but not stored")
    if fingerprint_arrays(arrays, tag=kind) != document.get("fingerprint"):
        raise CheckpointError(f"{path}: fingerprint mismatch, payload is corrupted")
    metadata = {k: v for k, v in document.items() if k not in ("arrays", "array_order")}
    return arrays, metadata
