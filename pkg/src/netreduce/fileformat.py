"""Manifest + weight-blob file format shared by networks, projections and heads.

An artifact saved at ``name.json`` consists of

* ``name.json``: compact UTF-8 JSON manifest. It carries ``"format": "NSNN"``,
  the format version, an artifact ``kind`` with kind-specific fields, and a
  ``blobs`` list of ``{name, shape, offset, length}`` records in file order.
* ``name.bin``: the magic bytes ``NSNN``, one version byte, then every array
  as little-endian float32, concatenated in manifest order. Offsets are
  absolute byte positions in this file.

The stored size of an artifact is ``len(manifest) + 5 + 4 * n_values``.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ValidationError

MAGIC = b"NSNN"
VERSION = 1
HEADER_LEN = len(MAGIC) + 1
BYTES_PER_VALUE = 4
_DTYPE = np.dtype("<f4")


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def blob_path(manifest_path: str | os.PathLike) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def encode(kind: str, fields: dict, arrays: list[tuple[str, np.ndarray]]) -> tuple[bytes, bytes]:
    """Return ``(manifest_bytes, blob_bytes)`` for an artifact."""
    records = []
    chunks = [MAGIC, bytes([VERSION])]
    offset = HEADER_LEN
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        records.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "NSNN", "version": VERSION, "kind": kind, **fields,
                "n_values": sum(int(np.size(a)) for _, a in arrays), "blobs": records}
    text = json.dumps(manifest, separators=(",", ":"), allow_nan=False)
    return text.encode("utf-8"), b"".join(chunks)


def stored_size(kind: str, fields: dict, arrays: list[tuple[str, np.ndarray]]) -> int:
    manifest, _ = encode(kind, fields, arrays)
    n_values = sum(int(np.size(a)) for _, a in arrays)
    return len(manifest) + HEADER_LEN + BYTES_PER_VALUE * n_values


def write_artifact(path, kind: str, fields: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    manifest, blob = encode(kind, fields, arrays)
    # blob first: a manifest on disk always points at a complete blob
    atomic_write(blob_path(path), blob)
    atomic_write(path, manifest)


def parse_manifest(data: bytes) -> dict:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not valid UTF-8", exc.start) from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", len(text[:exc.pos].encode())) from None
    if not isinstance(manifest, dict) or manifest.get("format") != "NSNN":
        raise FormatError("manifest does not declare format NSNN", 0)
    if manifest.get("version") != VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')!r}", 0)
    if not isinstance(manifest.get("blobs"), list):
        raise ValidationError("manifest has no blob list")
    return manifest


def decode_blobs(manifest: dict, blob: bytes) -> dict[str, np.ndarray]:
    """Slice the float32 arrays out of ``blob``; values come back as float64."""
    if len(blob) < HEADER_LEN:
        raise FormatError("weight blob is shorter than its header", len(blob))
    if blob[:4] != MAGIC:
        raise FormatError("weight blob does not start with magic NSNN", 0)
    if blob[4] != VERSION:
        raise FormatError(f"unsupported weight blob version {blob[4]}", 4)
    arrays: dict[str, np.ndarray] = {}
    expected = HEADER_LEN
    for rec in manifest["blobs"]:
        try:
            name, shape, offset, length = rec["name"], tuple(rec["shape"]), rec["offset"], rec["length"]
        except (KeyError, TypeError):
            raise ValidationError(f"malformed blob record {rec!r}") from None
        count = int(np.prod(shape, dtype=np.int64))
        if length != count * BYTES_PER_VALUE:
            raise ValidationError(f"blob {name!r}: length {length} does not match shape {list(shape)}")
        if offset != expected:
            raise ValidationError(f"blob {name!r}: offset {offset}, expected {expected}")
        if offset + length > len(blob):
            raise FormatError(f"weight blob truncated inside {name!r}", len(blob))
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset).astype(np.float64).reshape(shape)
        expected = offset + length
    if expected != len(blob):
        raise ValidationError(f"weight blob has {len(blob) - expected} trailing bytes not described by the manifest")
    if manifest.get("n_values") != sum(a.size for a in arrays.values()):
        raise ValidationError("manifest n_values does not match its blob records")
    return arrays


def read_artifact(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    for p in (path, blob_path(path)):
        if not p.is_file():
            raise DataError(f"artifact file {p} does not exist")
    manifest = parse_manifest(path.read_bytes())
    if kind is not None and manifest.get("kind") != kind:
        raise ValidationError(f"{path}: expected a {kind!r} artifact, found {manifest.get('kind')!r}")
    arrays = decode_blobs(manifest, blob_path(path).read_bytes())
    return manifest, arrays


def artifact_size_on_disk(path) -> int:
    """Stored size recomputed from the files: manifest bytes plus blob bytes."""
    return Path(path).stat().st_size + blob_path(path).stat().st_size
