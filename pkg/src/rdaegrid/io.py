"""Binary artifact container: a JSON manifest followed by raw float64 tensors.

Layout::

    b"RDAEGRID"            8-byte magic
    uint64 little-endian   manifest length in bytes
    manifest               UTF-8 JSON, includes "tensors": [{"name", "shape"}, ...]
    payload                each tensor row-major, IEEE-754 little-endian float64,
                           in manifest order
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"RDAEGRID"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class ArtifactError(Exception):
    """Base class for unreadable artifact files."""


class FormatVersionError(ArtifactError):
    pass


class ManifestError(ArtifactError):
    pass


class TruncatedFileError(ArtifactError):
    pass


class ShapeMismatchError(ArtifactError):
    pass


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_arrays(path: str | Path, kind: str, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(manifest)
    header["format"] = kind
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=_DTYPE).tobytes())


def _header(data: bytes, path, kind: str) -> tuple[dict, int]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise ManifestError(f"{path}: not an artifact file")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise TruncatedFileError(f"{path}: manifest extends past end of file")
    try:
        header = json.loads(data[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(header, dict):
        raise ManifestError(f"{path}: manifest is not an object")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    if header.get("format") != kind:
        raise ManifestError(f"{path}: holds {header.get('format')!r}, expected {kind!r}")
    return header, 16 + n


def read_header(path: str | Path, kind: str) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        n = struct.unpack("<Q", head[8:16])[0] if len(head) == 16 and head[:8] == MAGIC else 0
        data = head + fh.read(n)
    return _header(data, path, kind)[0]


def load_arrays(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    header, offset = _header(data, path, kind)
    arrays: dict[str, np.ndarray] = {}
    for spec in header.get("tensors", []):
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(data):
            raise TruncatedFileError(f"{path}: tensor {spec['name']!r} is truncated")
        arrays[spec["name"]] = np.frombuffer(data, _DTYPE, count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ShapeMismatchError(f"{path}: {len(data) - offset} trailing bytes do not match the manifest shapes")
    return header, arrays
