"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic  b"HMTLCKPT"
    u32    format version
    u64    metadata length, then UTF-8 JSON metadata
    u32    tensor count, then per tensor:
             u16 name length, name bytes
             u8  dtype code (1 = float32, 2 = float64)
             u8  ndim, then ndim x u64 shape
             u64 byte length, raw little-endian values
    u32    CRC32 of everything above
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HMTLCKPT"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(Exception):
    exit_code = 2


class CheckpointVersionError(CheckpointError):
    exit_code = 3


class CheckpointCorruptError(CheckpointError):
    exit_code = 4


class FingerprintMismatchError(CheckpointError):
    exit_code = 5


@dataclass
class Checkpoint:
    config: str                                     # serialized RunConfig
    catalog_fingerprint: str
    taxonomy_fingerprint: str
    tensors: dict[str, np.ndarray]
    adam_step: int = 0
    adam: dict = field(default_factory=dict)        # lr, beta1, beta2, eps
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    best_valid_mrr: float = -1.0
    trainer: dict = field(default_factory=dict)     # best_epoch, bad_epochs
    version: int = FORMAT_VERSION

    def check_fingerprints(self, catalog_fp: str, taxonomy_fp: str) -> None:
        if catalog_fp != self.catalog_fingerprint or taxonomy_fp != self.taxonomy_fingerprint:
            raise FingerprintMismatchError(
                "catalog/taxonomy differ from the ones this checkpoint was trained on "
                f"(checkpoint {self.catalog_fingerprint[:12]}/{self.taxonomy_fingerprint[:12]}, "
                f"data {catalog_fp[:12]}/{taxonomy_fp[:12]})")


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
    raw_name = name.encode("utf-8")
    data = arr.astype(_DTYPES[code], copy=False).tobytes()
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<Q", len(data)) + data


def encode(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = list(ckpt.tensors.items())
    tensors += [(f"adam.m/{k}", v) for k, v in ckpt.adam_m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ckpt.adam_v.items()]
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    meta = {
        "config": ckpt.config,
        "catalog_fingerprint": ckpt.catalog_fingerprint,
        "taxonomy_fingerprint": ckpt.taxonomy_fingerprint,
        "adam_step": ckpt.adam_step,
        "adam": ckpt.adam,
        "epoch": ckpt.epoch,
        "best_valid_mrr": ckpt.best_valid_mrr,
        "trainer": ckpt.trainer,
        "n_params": len(ckpt.tensors),
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<Q", len(meta_raw)), meta_raw,
             struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(n, a) for n, a in tensors]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 4 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf[len(MAGIC):len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointCorruptError("checkpoint is truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError("checksum mismatch (truncated or corrupted file)")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"bad metadata: {exc}") from None
    (count,) = r.unpack("<I")
    tensors, m, v = {}, {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointCorruptError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        dtype = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointCorruptError(f"size mismatch for tensor {name!r}")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(body):
        raise CheckpointCorruptError("trailing bytes after tensors")
    return Checkpoint(meta["config"], meta["catalog_fingerprint"], meta["taxonomy_fingerprint"], tensors,
                      meta["adam_step"], meta["adam"], m, v, meta["epoch"], meta["best_valid_mrr"],
                      meta["trainer"], version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    return decode(buf)
