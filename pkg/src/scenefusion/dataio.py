"""On-disk container: a structured-text manifest plus flat little-endian
float32 binary arrays, each guarded by a CRC32 checksum. Scenes and
checkpoints share this one format.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"


class ContainerError(Exception):
    """Base class for container format failures."""


class FormatVersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


def write_container(path: str | Path, kind: str, arrays: dict[str, np.ndarray],
                    meta: dict[str, str] | None = None) -> None:
    """Write arrays (converted to little-endian float32) plus metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format_version = {FORMAT_VERSION}", f"kind = {kind}"]
    for key, value in (meta or {}).items():
        if "\n" in str(value) or "=" in key:
            raise ValueError(f"invalid metadata entry {key!r}")
        lines.append(f"meta.{key} = {value}")
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        fname = f"{name}.bin"
        raw = data.tobytes()
        (path / fname).write_bytes(raw)
        shape = ",".join(str(s) for s in data.shape)
        lines.append(f"array.{name}.file = {fname}")
        lines.append(f"array.{name}.shape = {shape}")
        lines.append(f"array.{name}.crc32 = {zlib.crc32(raw):08x}")
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_container(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict[str, str]]:
    """Read and validate a container; returns (kind, arrays, meta)."""
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise ContainerError(f"missing manifest: {manifest}")
    entries: dict[str, str] = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        entries[key] = value
    version = entries.get("format_version")
    if version != str(FORMAT_VERSION):
        raise FormatVersionError(
            f"unsupported format version {version!r}, expected {FORMAT_VERSION}")
    kind = entries.get("kind", "")
    meta = {k[len("meta."):]: v for k, v in entries.items() if k.startswith("meta.")}

    names = sorted({k[len("array."):-len(".file")] for k in entries
                    if k.startswith("array.") and k.endswith(".file")})
    arrays: dict[str, np.ndarray] = {}
    for name in names:
        fname = entries[f"array.{name}.file"]
        shape = tuple(int(s) for s in entries[f"array.{name}.shape"].split(",") if s)
        declared_crc = entries[f"array.{name}.crc32"]
        fpath = path / fname
        if not fpath.exists():
            raise ContainerError(f"missing array file: {fpath}")
        raw = fpath.read_bytes()
        if f"{zlib.crc32(raw):08x}" != declared_crc:
            raise ChecksumError(f"checksum mismatch in {fname}")
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(raw) != expected:
            raise ShapeMismatchError(
                f"{fname}: manifest declares shape {shape} ({expected} bytes) "
                f"but file has {len(raw)} bytes")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return kind, arrays, meta
