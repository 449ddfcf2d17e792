"""Named-tensor bundle files.

Layout: magic b"DLPH", version u16, entry count u32, then per entry a
u16 name length, the UTF-8 name, one dtype byte (0 = f32, 1 = f64), a u8
rank, the extents as little-endian u64, and the raw row-major payload.
All multi-byte integers are little-endian. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_bundle", "load_bundle", "BundleError", "file_sha256"]

MAGIC = b"DLPH"
VERSION = 1

_DTYPE_BYTE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_BYTE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class BundleError(IOError):
    pass


def save_bundle(path, entries: dict[str, np.ndarray]) -> None:
    """Write name->array entries; insertion order is preserved on disk."""
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        shape, rank = arr.shape, arr.ndim
        arr = np.ascontiguousarray(arr)  # promotes 0-d to 1-d, hence shape above
        if arr.dtype not in _DTYPE_BYTE:
            raise BundleError(f"entry {name!r}: dtype {arr.dtype} not storable (f32/f64 only)")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise BundleError(f"entry name too long ({len(raw_name)} bytes)")
        if rank > 0xFF:
            raise BundleError(f"entry {name!r}: rank {rank} exceeds u8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _DTYPE_BYTE[arr.dtype], rank))
        chunks.append(struct.pack(f"<{rank}Q", *shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(le.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_bundle(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise BundleError(f"cannot read bundle {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise BundleError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise BundleError(f"{path}: unsupported version {version}")
    off = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        dt_byte, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if dt_byte not in _BYTE_DTYPE:
            raise BundleError(f"{path}: entry {name!r} has unknown dtype byte {dt_byte}")
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dtype = _BYTE_DTYPE[dt_byte]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if rank == 0:
            n_bytes = dtype.itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=n_bytes // dtype.itemsize, offset=off)
        off += n_bytes
        out[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    if off != len(buf):
        raise BundleError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
