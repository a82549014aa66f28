"""Binary weight files, magic ``LASW0001``.

Layout (all integers little-endian):

    8s   magic "LASW0001"
    u32  tensor count
    per tensor:
        u16      name length, then UTF-8 name bytes
        u8       rank
        u32[r]   extents
        u64      absolute byte offset of its float32 little-endian payload
    payloads, in record order

Offsets must be non-overlapping and inside the file; save followed by load is
bit-exact.
"""
from __future__ import annotations

import struct

import numpy as np

from .network import WeightStore, init_weights
from .tensor import DTYPE

MAGIC = b"LASW0001"


class WeightFormatError(ValueError):
    """Wrong magic / unsupported version."""


class CorruptWeightFileError(ValueError):
    """Structurally broken weight file (truncation, bad offsets, bad shapes)."""


def save_weights(path, store: WeightStore) -> None:
    names = list(store.keys())
    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", len(names))
    records = []
    for name in names:
        arr = np.ascontiguousarray(store[name], dtype=DTYPE)
        nb = name.encode("utf-8")
        records.append((nb, arr))
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<B", arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", 0)  # offset backpatched below
    # backpatch offsets now that the header size is known
    offset = len(header)
    blob = bytearray(header)
    pos = len(MAGIC) + 4
    for nb, arr in records:
        pos += 2 + len(nb) + 1 + 4 * arr.ndim
        struct.pack_into("<Q", blob, pos, offset)
        pos += 8
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(blob)
        for _, arr in records:
            fh.write(arr.astype("<f4").tobytes())


def load_weights(path, config=None, seed: int = 0) -> WeightStore:
    """Read a weight file; if a NetworkConfig is given, validate every tensor
    name and shape against that architecture."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4:
        raise CorruptWeightFileError("file too short for a weight header")
    if data[:len(MAGIC)] != MAGIC:
        raise WeightFormatError(
            f"bad magic {data[:len(MAGIC)]!r}; expected {MAGIC!r} (unsupported version?)")
    (count,) = struct.unpack_from("<I", data, len(MAGIC))
    pos = len(MAGIC) + 4
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            if len(data) < pos + nlen:
                raise CorruptWeightFileError("truncated name record")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            entries.append((name, shape, offset))
    except struct.error as exc:
        raise CorruptWeightFileError("truncated weight header") from exc

    store = WeightStore(init_seed=-1)
    spans = []
    for name, shape, offset in entries:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * size
        if offset < pos or end > len(data):
            raise CorruptWeightFileError(
                f"tensor {name!r} payload [{offset}, {end}) is outside the file")
        spans.append((offset, end, name))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        store[name] = np.ascontiguousarray(arr.reshape(shape)).astype(DTYPE)
        store.schemes[name] = "loaded"
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptWeightFileError(f"payloads of {n0!r} and {n1!r} overlap")

    if config is not None:
        expected = init_weights(config, seed)
        missing = set(expected.keys()) - set(store.keys())
        extra = set(store.keys()) - set(expected.keys())
        if missing or extra:
            raise CorruptWeightFileError(
                f"weight file does not match the architecture: "
                f"missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name in expected:
            if store[name].shape != expected[name].shape:
                raise CorruptWeightFileError(
                    f"tensor {name!r} has shape {store[name].shape}, "
                    f"architecture expects {expected[name].shape}")
    return store
