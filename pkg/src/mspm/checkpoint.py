"""MSPM checkpoint and DESC descriptor-matrix binary formats.

Checkpoint layout (little-endian):
    magic "MSPM" | version u8=1 | tensor count u32
    per tensor: name length u16, UTF-8 name, ndim u8, dims u32 each, f32 data
    trailing config block: byte length u32, UTF-8 "key=value" lines

DESC layout: magic "DESC" | version u32=1 | count u32 | dim u32, then
count*dim float32 values row-major.
"""

import struct

import numpy as np

from .errors import CorruptFile, FormatError

CKPT_MAGIC = b"MSPM"
CKPT_VERSION = 1
DESC_MAGIC = b"DESC"
DESC_VERSION = 1


def save_checkpoint(path, store, config):
    tensors = list(store.named_tensors())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<B", CKPT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        blob = "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_checkpoint(path):
    """Returns ([(name, float32 array)], config dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9:
        raise CorruptFile(f"{path}: shorter than a checkpoint header")
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version = blob[4]
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 5)
    off = 9
    tensors = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            ndim = blob[off]
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(blob, "<f4", n, off).reshape(dims).copy()
            off += 4 * n
            tensors.append((name, arr))
        (clen,) = struct.unpack_from("<I", blob, off)
        off += 4
        raw = blob[off:off + clen]
        if len(raw) != clen:
            raise CorruptFile(f"{path}: truncated config block")
        off += clen
    except (struct.error, ValueError) as exc:
        raise CorruptFile(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(blob):
        raise CorruptFile(f"{path}: {len(blob) - off} trailing bytes")
    config = {}
    for line in raw.decode("utf-8").splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            config[key] = val
    return tensors, config


def write_desc(path, rows):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("descriptor matrix must be 2-d")
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<III", DESC_VERSION, rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def read_desc(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CorruptFile(f"{path}: shorter than a DESC header")
    if blob[:4] != DESC_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != DESC_VERSION:
        raise FormatError(f"{path}: unsupported DESC version {version}")
    if len(blob) != 16 + 4 * count * dim:
        raise CorruptFile(f"{path}: payload does not match count*dim")
    return np.frombuffer(blob, "<f4", count * dim, 16).reshape(count, dim).copy()
