"""Binary container for named tensors.

Layout, all little-endian:

    magic   4 bytes  b"GFTC"
    version u16
    count   u32      number of entries
    entry*  count times:
        name_len u16, name utf-8,
        dtype    u8   (1 = float32, 2 = uint8, 3 = int32),
        rank     u8,
        dims     rank x u64,
        payload  prod(dims) x itemsize bytes

Round trips are bit-exact for the supported dtypes. An optional metadata
dict rides along as a reserved "__meta__" entry holding UTF-8 JSON, so a
single file can carry both arrays and the configuration that produced
them. Writes go to a temp file then rename, so readers never see a
half-written container.
"""

import json
import os
import struct

import numpy as np

from ..errors import TensorFormatError

__all__ = ["MAGIC", "VERSION", "write_tensors", "read_tensors"]

MAGIC = b"GFTC"
VERSION = 1
META_NAME = "__meta__"

_CODE_BY_KIND = {"float32": 1, "uint8": 2, "int32": 3}
_DTYPE_BY_CODE = {1: np.dtype("<f4"), 2: np.dtype("|u1"), 3: np.dtype("<i4")}
_MAX_RANK = 8


def _encode_entry(name, array):
    # tobytes() below serializes C order for any memory layout, and
    # asarray (unlike ascontiguousarray) keeps rank-0 arrays rank 0.
    array = np.asarray(array)
    kind = array.dtype.name
    if kind not in _CODE_BY_KIND:
        raise TensorFormatError(
            f"entry {name!r} has dtype {kind}; supported: "
            f"{sorted(_CODE_BY_KIND)}"
        )
    if array.ndim > _MAX_RANK:
        raise TensorFormatError(
            f"entry {name!r} has rank {array.ndim} > {_MAX_RANK}"
        )
    raw_name = name.encode("utf-8")
    if not raw_name or len(raw_name) > 0xFFFF:
        raise TensorFormatError(f"bad entry name {name!r}")
    code = _CODE_BY_KIND[kind]
    header = struct.pack("<H", len(raw_name)) + raw_name
    header += struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = array.astype(_DTYPE_BY_CODE[code], copy=False).tobytes()
    return header + payload


def write_tensors(path, arrays, meta=None):
    """Write named arrays (dict name -> ndarray) plus an optional JSON-able
    metadata dict to one container file."""
    entries = []
    for name, array in arrays.items():
        if name == META_NAME:
            raise TensorFormatError(
                f"{META_NAME!r} is reserved for the metadata entry"
            )
        entries.append(_encode_entry(name, np.asarray(array)))
    if meta is not None:
        blob = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
        entries.append(_encode_entry(META_NAME, blob))

    out = MAGIC + struct.pack("<HI", VERSION, len(entries)) + b"".join(entries)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(out)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TensorFormatError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have "
                f"{len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def read_tensors(path):
    """Read a container; returns (arrays dict, meta dict or None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not a tensor container")
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != VERSION:
        raise TensorFormatError(
            f"{path}: unsupported container version {version}"
        )
    (count,) = struct.unpack("<I", r.take(4, "entry count"))

    arrays = {}
    meta = None
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(name_len, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, f"{name} header"))
        if code not in _DTYPE_BY_CODE:
            raise TensorFormatError(f"{path}: unknown dtype code {code}")
        if rank > _MAX_RANK:
            raise TensorFormatError(f"{path}: entry {name!r} rank {rank}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{name} dims"))
        dtype = _DTYPE_BY_CODE[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = r.take(n_bytes, f"{name} payload")
        array = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        if name == META_NAME:
            meta = json.loads(array.tobytes().decode("utf-8"))
        else:
            arrays[name] = array
    if r.pos != len(data):
        raise TensorFormatError(
            f"{path}: {len(data) - r.pos} trailing bytes after last entry"
        )
    return arrays, meta
