"""Single-file binary containers for training samples.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic b"ERDS"
    4       2     format version (currently 1)
    6       1     sample kind: 0 = paired, 1 = unpaired
    7       2     image height
    9       2     image width
    11      4     sample count
    15      32    config hash (sha256, zero bytes when absent)
    47      32    sha256 of the payload
    79      ...   payload: samples back to back

Per-sample payload:

    paired:    X float32[H*W*3], Y float32[H*W*3], M uint8[H*W]
    unpaired:  X float32[H*W*3], M uint8[H*W], entity_index uint32

A sibling ``<path>.manifest`` file records the same header fields plus caller
metadata as UTF-8 ``key=value`` lines.  Reads verify magic, version, declared
sizes and the payload checksum, and optionally compare the config hash.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

from .scenegen import DatasetError, PairedSample, UnpairedSample

MAGIC = b"ERDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBHHI32s32s")
_KINDS = {"paired": 0, "unpaired": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


def _coerce_hash(config_hash: str | bytes | None) -> bytes:
    if config_hash is None:
        return b"\x00" * 32
    if isinstance(config_hash, str):
        config_hash = bytes.fromhex(config_hash)
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes (sha256)")
    return config_hash


def _sample_bytes(sample, h: int, w: int) -> bytes:
    def check_img(a, name):
        if a.shape != (h, w, 3) or a.dtype != np.float32:
            raise DatasetError(f"{name} must be float32 ({h}, {w}, 3), got "
                               f"{a.dtype} {a.shape}")

    def check_mask(m):
        if m.shape != (h, w) or m.dtype != np.uint8:
            raise DatasetError(f"mask must be uint8 ({h}, {w}), got {m.dtype} {m.shape}")

    if isinstance(sample, PairedSample):
        check_img(sample.x, "X")
        check_img(sample.y, "Y")
        check_mask(sample.mask)
        return (sample.x.astype("<f4").tobytes()
                + sample.y.astype("<f4").tobytes()
                + sample.mask.tobytes())
    if isinstance(sample, UnpairedSample):
        check_img(sample.x, "X")
        check_mask(sample.mask)
        return (sample.x.astype("<f4").tobytes()
                + sample.mask.tobytes()
                + struct.pack("<I", sample.entity_index))
    raise DatasetError(f"unsupported sample type {type(sample).__name__}")


def _sample_size(kind: str, h: int, w: int) -> int:
    if kind == "paired":
        return 2 * h * w * 3 * 4 + h * w
    return h * w * 3 * 4 + h * w + 4


def write_dataset(samples, path, *, kind: str | None = None,
                  config_hash: str | bytes | None = None,
                  extra_manifest: dict | None = None) -> dict:
    """Serialize samples to `path` plus a `<path>.manifest` sidecar.

    The sample kind is inferred from the first sample; an empty list needs an
    explicit `kind`.  Returns the manifest as a dict.
    """
    samples = list(samples)
    path = Path(path)
    if samples:
        inferred = "paired" if isinstance(samples[0], PairedSample) else "unpaired"
        if kind is not None and kind != inferred:
            raise DatasetError(f"declared kind {kind!r} does not match samples ({inferred})")
        kind = inferred
        h, w = samples[0].x.shape[:2]
    else:
        if kind is None:
            raise DatasetError("an empty dataset needs an explicit kind")
        if kind not in _KINDS:
            raise DatasetError(f"unknown dataset kind {kind!r}")
        h = w = 0

    payload = b"".join(_sample_bytes(s, h, w) for s in samples)
    digest = hashlib.sha256(payload).digest()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _KINDS[kind], h, w,
                          len(samples), _coerce_hash(config_hash), digest)
    path.write_bytes(header + payload)

    manifest = {
        "format": "erasekit-dataset",
        "version": str(FORMAT_VERSION),
        "kind": kind,
        "height": str(h),
        "width": str(w),
        "count": str(len(samples)),
        "config_hash": _coerce_hash(config_hash).hex(),
        "payload_sha256": digest.hex(),
    }
    manifest.update({str(k): str(v) for k, v in (extra_manifest or {}).items()})
    write_manifest(manifest, manifest_path(path))
    return manifest


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def write_manifest(manifest: dict, path) -> None:
    lines = [f"{k}={v}" for k, v in manifest.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"malformed manifest line: {line!r}")
        key, value = line.split("=", 1)
        out[key] = value
    return out


def read_dataset(path, *, expected_config_hash: str | bytes | None = None) -> list:
    """Load samples, verifying structure and payload checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError("file too short to hold a dataset header")
    magic, version, kind_code, h, w, count, config_hash, digest = _HEADER.unpack(
        raw[:_HEADER.size])
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}; not a dataset file")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    if kind_code not in _KIND_NAMES:
        raise DatasetError(f"unknown sample kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]

    payload = raw[_HEADER.size:]
    expected_len = count * _sample_size(kind, h, w) if count else 0
    if len(payload) != expected_len:
        raise DatasetError(f"payload length {len(payload)} does not match header "
                           f"(expected {expected_len})")
    if hashlib.sha256(payload).digest() != digest:
        raise DatasetError("payload checksum mismatch; file is corrupt")
    if expected_config_hash is not None:
        if _coerce_hash(expected_config_hash) != config_hash:
            raise DatasetError("dataset config hash does not match the expected config")

    samples = []
    img_bytes = h * w * 3 * 4
    mask_bytes = h * w
    off = 0
    for _ in range(count):
        x = np.frombuffer(payload, dtype="<f4", count=h * w * 3, offset=off)
        x = x.reshape(h, w, 3).astype(np.float32)
        off += img_bytes
        if kind == "paired":
            y = np.frombuffer(payload, dtype="<f4", count=h * w * 3, offset=off)
            y = y.reshape(h, w, 3).astype(np.float32)
            off += img_bytes
            m = np.frombuffer(payload, dtype=np.uint8, count=h * w, offset=off)
            m = m.reshape(h, w).copy()
            off += mask_bytes
            samples.append(PairedSample(x=x, y=y, mask=m, seed=-1))
        else:
            m = np.frombuffer(payload, dtype=np.uint8, count=h * w, offset=off)
            m = m.reshape(h, w).copy()
            off += mask_bytes
            (idx,) = struct.unpack_from("<I", payload, off)
            off += 4
            samples.append(UnpairedSample(x=x, mask=m, entity_index=idx, seed=-1))
    return samples
