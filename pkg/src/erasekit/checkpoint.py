"""Binary checkpoint container: named tensors plus key=value metadata.

Layout (little-endian):

    magic b"ERCK" | version u16 | config hash 32 bytes | meta count u32 |
    tensor count u32 | payload sha256 32 bytes | payload

The payload holds the metadata entries (key and value as length-prefixed
UTF-8) followed by the tensors (length-prefixed name, dtype code, rank, dims,
raw data).  Bit-exact round-trips are part of the contract: float arrays are
stored raw, so save/load returns the same bytes.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ERCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH32sII32s")
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1", 4: "<i4"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    """Raised for malformed, corrupt or mismatched checkpoint files."""


def _coerce_hash(config_hash) -> bytes:
    if config_hash is None:
        return b"\x00" * 32
    if isinstance(config_hash, str):
        config_hash = bytes.fromhex(config_hash)
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes (sha256)")
    return config_hash


def save_checkpoint(path, tensors: dict, meta: dict | None = None,
                    config_hash=None) -> None:
    """Write named numpy arrays and string metadata to `path`."""
    meta = {str(k): str(v) for k, v in (meta or {}).items()}
    chunks = []
    for key, value in meta.items():
        kb = key.encode("utf-8")
        vb = value.encode("utf-8")
        chunks.append(struct.pack("<H", len(kb)) + kb
                      + struct.pack("<I", len(vb)) + vb)
    for name, arr in tensors.items():
        # asarray with explicit order keeps 0-dim arrays 0-dim
        arr = np.asarray(arr, order="C")
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">"
                                else arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        data = arr.astype(_DTYPES[code]).tobytes()
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb
                      + struct.pack("<BB", code, arr.ndim)
                      + struct.pack(f"<{arr.ndim}I", *arr.shape)
                      + struct.pack("<Q", len(data)) + data)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).digest()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _coerce_hash(config_hash),
                          len(meta), len(tensors), digest)
    Path(path).write_bytes(header + payload)


def load_checkpoint(path, expected_config_hash=None):
    """Read a checkpoint, verifying the checksum.  Returns (tensors, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError("file too short to hold a checkpoint header")
    magic, version, config_hash, n_meta, n_tensors, digest = _HEADER.unpack(
        raw[:_HEADER.size])
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = raw[_HEADER.size:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("payload checksum mismatch; file is corrupt")
    if expected_config_hash is not None:
        if _coerce_hash(expected_config_hash) != config_hash:
            raise CheckpointError("checkpoint config hash does not match expectation")

    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        out = payload[off:off + n]
        off += n
        return out

    meta = {}
    for _ in range(n_meta):
        (klen,) = struct.unpack("<H", take(2))
        key = take(klen).decode("utf-8")
        (vlen,) = struct.unpack("<I", take(4))
        meta[key] = take(vlen).decode("utf-8")

    tensors = {}
    for _ in range(n_tensors):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(take(nbytes), dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = arr.copy()
    if off != len(payload):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return tensors, meta


def stored_config_hash(path) -> bytes:
    """The 32-byte config hash recorded in a checkpoint header."""
    raw = Path(path).read_bytes()[:_HEADER.size]
    if len(raw) < _HEADER.size:
        raise CheckpointError("file too short to hold a checkpoint header")
    _, _, config_hash, _, _, _ = _HEADER.unpack(raw)
    return config_hash
