"""File containers: VNMT tensors, packed V:N:M files, CSV matrices and speedup tables.

VNMT layout (little-endian)::

    b"VNMT" | u16 version=1 | u8 dtype | u8 ndim | ndim x u64 dims | payload

dtype 0 is a row-major float32 payload. dtype 1 is a packed V:N:M matrix whose
body is ``u32 v, n, m, rows, cols`` followed by a_n (float32), a_i1 (u8) and
a_i2 (u8); packed files carry no ndim/dims fields.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .core import FormatError, PackedVnm, SpeedupTable, VnmError, VnmPattern

MAGIC = b"VNMT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_PACKED = 1
_PREFIX = struct.Struct("<4sHB")
_MAX_ELEMENTS = 1 << 40

PathLike = Union[str, Path]


def _read_prefix(buf: bytes, want_dtype: int) -> int:
    if len(buf) < _PREFIX.size:
        raise FormatError("truncated header")
    magic, version, dtype = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != VERSION:
        raise FormatError(f"unsupported VNMT version {version}")
    if dtype != want_dtype:
        raise FormatError(f"unexpected dtype tag {dtype}, wanted {want_dtype}")
    return _PREFIX.size


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim not in (1, 2):
        raise FormatError(f"only 1-D and 2-D tensors are supported, got ndim={a.ndim}")
    if not np.isfinite(a).all():
        raise VnmError("tensor contains NaN or Inf")
    head = _PREFIX.pack(MAGIC, VERSION, DTYPE_F32) + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    off = _read_prefix(buf, DTYPE_F32)
    if len(buf) < off + 1:
        raise FormatError("truncated header")
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    if ndim not in (1, 2):
        raise FormatError(f"only 1-D and 2-D tensors are supported, got ndim={ndim}")
    if len(buf) < off + 8 * ndim:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise FormatError("dimension overflow")
    need = off + 4 * count
    if len(buf) < need:
        raise FormatError("truncated payload")
    if len(buf) > need:
        raise FormatError("trailing bytes after payload")
    a = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32)
    a = a.reshape(dims)
    if not np.isfinite(a).all():
        raise VnmError("tensor contains NaN or Inf")
    return a


def read_csv_matrix(path: PathLike) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if rec and any(c.strip() for c in rec):
                rows.append([float(c) for c in rec])
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ragged CSV rows")
    a = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(a).all():
        raise VnmError("tensor contains NaN or Inf")
    return a


def write_csv_matrix(a: np.ndarray, path: PathLike) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=np.float32))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in a:
            w.writerow([repr(float(x)) for x in row])


def read_tensor(path: PathLike) -> np.ndarray:
    """Read a VNMT float tensor, or a CSV matrix when the suffix is ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv_matrix(path)
    return decode_tensor(path.read_bytes())


def write_tensor(a: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv_matrix(a, path)
    else:
        path.write_bytes(encode_tensor(a))


_PACKED_HEAD = struct.Struct("<5I")


def encode_packed(p: PackedVnm) -> bytes:
    pat = p.pattern
    out = _PREFIX.pack(MAGIC, VERSION, DTYPE_PACKED)
    out += _PACKED_HEAD.pack(pat.v, pat.n, pat.m, p.rows, p.cols)
    out += np.ascontiguousarray(p.a_n, dtype="<f4").tobytes()
    out += p.a_i1.astype(np.uint8).tobytes()
    out += p.a_i2.astype(np.uint8).tobytes()
    return out


def decode_packed(buf: bytes) -> PackedVnm:
    off = _read_prefix(buf, DTYPE_PACKED)
    if len(buf) < off + _PACKED_HEAD.size:
        raise FormatError("truncated header")
    v, n, m, rows, cols = _PACKED_HEAD.unpack_from(buf, off)
    off += _PACKED_HEAD.size
    pattern = VnmPattern(v=v, n=n, m=m)
    pattern.check_divisible(rows, cols)
    k = 2 * cols // m
    n_vals = rows * k
    n_i1 = (rows // v) * (cols // m) * 4
    need = off + 4 * n_vals + n_i1 + n_vals
    if len(buf) < need:
        raise FormatError("truncated payload")
    if len(buf) > need:
        raise FormatError("trailing bytes after payload")
    a_n = np.frombuffer(buf, dtype="<f4", count=n_vals, offset=off).astype(np.float32)
    off += 4 * n_vals
    a_i1 = np.frombuffer(buf, dtype=np.uint8, count=n_i1, offset=off)
    off += n_i1
    a_i2 = np.frombuffer(buf, dtype=np.uint8, count=n_vals, offset=off)
    return PackedVnm(pattern, rows, cols, a_n, a_i1, a_i2)


def read_packed(path: PathLike) -> PackedVnm:
    return decode_packed(Path(path).read_bytes())


def write_packed(p: PackedVnm, path: PathLike) -> None:
    Path(path).write_bytes(encode_packed(p))


# Speedup tables: header ``v,m,speedup``; ``v=*`` marks the 2:4 baseline row.

def format_speedup_table(table: SpeedupTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["v", "m", "speedup"])
    for (v, m), s in table:
        w.writerow(["*" if v is None else v, m, f"{s:.6g}"])
    return buf.getvalue()


def parse_speedup_table(text: str, batch_size: int = 1) -> SpeedupTable:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:3]] != ["v", "m", "speedup"]:
        raise FormatError("speedup table must start with header 'v,m,speedup'")
    entries = {}
    for rec in reader:
        v_raw = rec["v"].strip()
        try:
            m = int(rec["m"])
            v = None if v_raw in ("*", "X", "x") else int(v_raw)
            s = float(rec["speedup"])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad speedup row {rec}") from exc
        key = (None if m == 4 else v, m)
        if key in entries:
            raise VnmError(f"duplicate speedup entry for {key}")
        entries[key] = s
    return SpeedupTable(entries, batch_size=batch_size)


def read_speedup_table(path: PathLike, batch_size: int = 1) -> SpeedupTable:
    return parse_speedup_table(Path(path).read_text(), batch_size)


def write_speedup_table(table: SpeedupTable, path: PathLike) -> None:
    Path(path).write_text(format_speedup_table(table))


def dump_json(obj, path: PathLike) -> None:
    """Write JSON with a stable key order so reruns are byte-identical."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
