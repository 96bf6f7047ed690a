"""Binary tensor (.tns) files and checksummed checkpoint directories.

.tns layout: magic "TNSR", version byte 0x01, rank byte, rank little-endian
uint32 extents, dtype byte (0x01 = float32, 0x02 = float64), then raw
little-endian scalars in row-major order.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class TnsParseError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def write_tns(path, array: np.ndarray):
    arr = np.asarray(array, order="C")   # preserves rank-0 scalars
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION, arr.ndim]))
        for ext in arr.shape:
            f.write(struct.pack("<I", ext))
        f.write(bytes([_CODES[arr.dtype]]))
        if arr.dtype == np.float32:
            f.write(arr.astype("<f4").tobytes())
        else:
            f.write(arr.astype("<f8").tobytes())


def read_tns(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise TnsParseError("bad magic", 0)
    if len(blob) < 6:
        raise TnsParseError("truncated header", len(blob))
    if blob[4] != VERSION:
        raise TnsParseError(f"unsupported version {blob[4]}", 4)
    rank = blob[5]
    off = 6
    if len(blob) < off + 4 * rank + 1:
        raise TnsParseError("truncated extents", len(blob))
    dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
    off += 4 * rank
    code = blob[off]
    off += 1
    if code not in _DTYPES:
        raise TnsParseError(f"unknown dtype code {code}", off - 1)
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    need = count * dtype.itemsize
    if len(blob) - off != need:
        raise TnsParseError(f"payload size {len(blob) - off}, expected {need}", off)
    return np.frombuffer(blob[off:], dtype=dtype).reshape(dims).copy()


# ---------------------------------------------------------------------------
# Checkpoints: a directory of named .tns files plus a manifest with 64-bit
# content checksums.


class CheckpointError(RuntimeError):
    pass


def _checksum(path) -> int:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        h.update(f.read())
    return int.from_bytes(h.digest(), "little")


def _safe_name(name: str) -> str:
    return name.replace("/", "_").replace(".", "_")


def save_checkpoint(directory, tensors: dict[str, np.ndarray], extra_files=()):
    """extra_files: iterable of sidecar filenames (already written into
    `directory`) that should be listed and checksummed in the manifest."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        fname = _safe_name(name) + ".tns"
        path = os.path.join(directory, fname)
        write_tns(path, tensors[name])
        dims = "x".join(str(d) for d in np.asarray(tensors[name]).shape) or "scalar"
        lines.append(f"{name} {fname} {dims} {_checksum(path):016x}")
    for fname in extra_files:
        path = os.path.join(directory, fname)
        lines.append(f"@sidecar {fname} - {_checksum(path):016x}")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise CheckpointError(f"missing manifest in {directory}")
    out = {}
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, fname, _dims, csum = line.split()
            path = os.path.join(directory, fname)
            if not os.path.exists(path):
                raise CheckpointError(f"missing checkpoint file for '{name}'")
            if _checksum(path) != int(csum, 16):
                raise CheckpointError(f"checksum mismatch for tensor '{name}'")
            if name != "@sidecar":
                out[name] = read_tns(path)
    return out


def checkpoint_sidecars(directory) -> list[str]:
    manifest = os.path.join(directory, "manifest.txt")
    names = []
    with open(manifest) as f:
        for line in f:
            parts = line.split()
            if parts and parts[0] == "@sidecar":
                names.append(parts[1])
    return names
