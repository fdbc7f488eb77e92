"""Little-endian binary containers: matrices (CFE1/CEM1), code grids (CODE), checkpoints (ZFCK)."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MagicError, NonFiniteError, TruncatedError, VersioningError

FEATURE_MAGIC = b"CFE1"
CEMBED_MAGIC = b"CEM1"
CODE_MAGIC = b"CODE"
CHECKPOINT_MAGIC = b"ZFCK"
VERSION = 1


def write_matrix(path, values, magic=FEATURE_MAGIC):
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise FormatError(f"matrix must be 2-d, got shape {values.shape}")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<III", VERSION, rows, cols))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_matrix(path, magic=FEATURE_MAGIC):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise MagicError(f"{path}: magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    version, rows, cols = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: version={version}, expected {VERSION}")
    if rows == 0 or cols == 0:
        raise FormatError(f"{path}: degenerate header rows={rows} cols={cols}")
    need = 16 + 4 * rows * cols
    if len(raw) < need:
        raise TruncatedError(f"{path}: payload has {len(raw) - 16} bytes, header declares {need - 16}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after payload")
    values = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=16).reshape(rows, cols)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{path}: non-finite values in payload")
    return values.astype(np.float32)


def write_code_grid(path, indices, label):
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise FormatError(f"code grid must be 2-d, got {idx.shape}")
    rows, cols = idx.shape
    with open(path, "wb") as fh:
        fh.write(CODE_MAGIC)
        fh.write(struct.pack("<IIII", VERSION, rows, cols, int(label)))
        fh.write(idx.astype("<u4").tobytes())


def read_code_grid(path):
    """Returns (indices (rows, cols) int64, label)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CODE_MAGIC:
        raise MagicError(f"{path}: magic {raw[:4]!r}, expected {CODE_MAGIC!r}")
    if len(raw) < 20:
        raise TruncatedError(f"{path}: header truncated")
    version, rows, cols, label = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: version={version}, expected {VERSION}")
    if rows == 0 or cols == 0:
        raise FormatError(f"{path}: degenerate header rows={rows} cols={cols}")
    if len(raw) != 20 + 4 * rows * cols:
        raise TruncatedError(f"{path}: payload size {len(raw) - 20} != {4 * rows * cols}")
    idx = np.frombuffer(raw, dtype="<u4", offset=20).reshape(rows, cols)
    return idx.astype(np.int64), int(label)


# -- checkpoints -------------------------------------------------------------
def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, tensors, meta, config_hash, step):
    """Layout: magic, u32 version, str config_hash, u64 step, str meta-json,
    u32 n, then per tensor: str name, u32 ndim, u32 dims..., f32 data."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", VERSION), _pack_str(config_hash),
             struct.pack("<Q", int(step)), _pack_str(json.dumps(meta, sort_keys=True)),
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns dict with keys tensors, meta, config_hash, step."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise MagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise TruncatedError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        if pos + n > len(raw):
            raise TruncatedError(f"{path}: truncated string at byte {pos}")
        s = raw[pos:pos + n].decode("utf-8")
        pos += n
        return s

    (version,) = take("<I")
    if version != VERSION:
        raise VersioningError(f"{path}: checkpoint version {version}, expected {VERSION}")
    config_hash = take_str()
    (step,) = take("<Q")
    meta = json.loads(take_str())
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        name = take_str()
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if pos + 4 * n > len(raw):
            raise TruncatedError(f"{path}: tensor {name} truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return {"tensors": tensors, "meta": meta, "config_hash": config_hash, "step": int(step)}
