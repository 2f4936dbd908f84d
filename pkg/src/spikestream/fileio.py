"""Little-endian binary containers for spike maps (SSPK) and dense tensors (SDNS).

SSPK layout::

    magic  b"SSPK"
    version u16
    H, W, C u32
    index_width u8
    nnz u64
    s_ptr  (H*W + 1) entries at the stored pointer width
    c_idcs nnz entries at index_width

The pointer width is not stored: it follows from (H, W, C, index_width)
exactly as :func:`spikestream.formats.sptr_width_for` derives it.

SDNS layout::

    magic b"SDNS", version u16, ndim u8, dims u32[ndim], format tag u8
    raw little-endian values
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .formats import CompressedSpikeMap, sptr_width_for

SSPK_MAGIC = b"SSPK"
SDNS_MAGIC = b"SDNS"
VERSION = 1

_SSPK_HEADER = struct.Struct("<4sHIIIBQ")

# element format tags
FORMAT_TAGS = {1: "<f4", 2: "<f2", 3: "<f8", 4: "<u1", 5: "<i4"}
_TAG_OF = {np.dtype(v).str: k for k, v in FORMAT_TAGS.items()}


def sspk_bytes(m: CompressedSpikeMap) -> bytes:
    header = _SSPK_HEADER.pack(
        SSPK_MAGIC, VERSION, m.height, m.width, m.channels, m.index_width, m.nnz
    )
    return header + m.s_ptr.astype(m.s_ptr.dtype.newbyteorder("<")).tobytes() + m.c_idcs.astype(
        m.c_idcs.dtype.newbyteorder("<")
    ).tobytes()


def parse_sspk(buf: bytes) -> CompressedSpikeMap:
    if len(buf) < _SSPK_HEADER.size:
        raise FormatError("truncated SSPK header")
    magic, version, h, w, c, iw, nnz = _SSPK_HEADER.unpack_from(buf)
    if magic != SSPK_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported SSPK version {version}")
    sw = sptr_width_for(h, w, c, iw)
    off = _SSPK_HEADER.size
    n_ptr = h * w + 1
    need = off + n_ptr * sw // 8 + nnz * iw // 8
    if len(buf) != need:
        raise FormatError(f"SSPK payload is {len(buf)} bytes, header implies {need}")
    s_ptr = np.frombuffer(buf, dtype=f"<u{sw // 8}", count=n_ptr, offset=off)
    off += n_ptr * sw // 8
    c_idcs = np.frombuffer(buf, dtype=f"<u{iw // 8}", count=nnz, offset=off)
    return CompressedSpikeMap(h, w, c, s_ptr, c_idcs, iw)


def write_sspk(path, m: CompressedSpikeMap) -> None:
    Path(path).write_bytes(sspk_bytes(m))


def read_sspk(path) -> CompressedSpikeMap:
    return parse_sspk(Path(path).read_bytes())


def sdns_bytes(values: np.ndarray, dtype="<f4") -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    tag = _TAG_OF.get(dt.str)
    if tag is None:
        raise FormatError(f"no SDNS tag for dtype {dt}")
    arr = np.ascontiguousarray(values, dtype=dt)
    out = io.BytesIO()
    out.write(struct.pack("<4sHB", SDNS_MAGIC, VERSION, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(struct.pack("<B", tag))
    out.write(arr.tobytes())
    return out.getvalue()


def parse_sdns(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise FormatError("truncated SDNS header")
    magic, version, ndim = struct.unpack_from("<4sHB", buf)
    if magic != SDNS_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported SDNS version {version}")
    off = 7
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    (tag,) = struct.unpack_from("<B", buf, off)
    off += 1
    if tag not in FORMAT_TAGS:
        raise FormatError(f"unknown SDNS format tag {tag}")
    dt = np.dtype(FORMAT_TAGS[tag])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise FormatError("SDNS payload size does not match shape")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).copy()


def write_sdns(path, values: np.ndarray, dtype="<f4") -> None:
    Path(path).write_bytes(sdns_bytes(values, dtype))


def read_sdns(path) -> np.ndarray:
    return parse_sdns(Path(path).read_bytes())
