"""Versioned binary container for named float arrays (checkpoints).

Layout: magic "COMENCK1", u32 version, u32 array count, then per array a
u16 name length, the utf-8 name, u8 rank, u32 dims, and raw little-endian
float64 data; a CRC32 of everything after the magic closes the file.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import ChecksumError, MalformedHeaderError, TruncatedPayloadError

MAGIC = b"COMENCK1"
VERSION = 1


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(np.array(arr.shape, dtype="<u4").tobytes())
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC + body + np.uint32(zlib.crc32(body)).tobytes())


def read_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12:
        raise MalformedHeaderError("file too short for a checkpoint header")
    if blob[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError(f"bad magic {blob[:len(MAGIC)]!r}")
    body, stored = blob[len(MAGIC):-4], blob[-4:]
    if zlib.crc32(body) != int(np.frombuffer(stored, dtype="<u4")[0]):
        raise ChecksumError("checkpoint CRC32 mismatch")
    version, count = struct.unpack_from("<II", body, 0)
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported checkpoint version {version}")
    off = 8
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = np.frombuffer(body, dtype="<u4", count=rank, offset=off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=off)
            off += 8 * n
            arrays[name] = arr.reshape(tuple(int(d) for d in dims)).copy()
    except (struct.error, ValueError) as exc:
        raise TruncatedPayloadError(f"checkpoint ends mid-record: {exc}") from exc
    if off != len(body):
        raise TruncatedPayloadError(f"{len(body) - off} trailing bytes in checkpoint")
    return arrays


def pack_state(prefix: str, arrays: dict[str, np.ndarray],
               into: dict[str, np.ndarray]) -> None:
    for key, val in arrays.items():
        into[f"{prefix}.{key}"] = val


def unpack_state(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
