"""Compressed and dense tensor representations.

Convolutional spike maps are stored in a CSR-derived layout: one spatial
pointer array ``s_ptr`` (length ``H*W + 1``) and one channel index array
``c_idcs``. Spikes carry no value, so no value array exists. Fully
connected inputs reduce to a single sorted index array plus a count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import GeometryMismatch, IndexWidthOverflow, MalformedMap

INDEX_WIDTHS = (8, 16, 32)

_UINT = {8: np.uint8, 16: np.uint16, 32: np.uint32}


def uint_dtype(bits: int):
    try:
        return _UINT[bits]
    except KeyError:
        raise IndexWidthOverflow(f"unsupported index width {bits}") from None


def sptr_width_for(height: int, width: int, channels: int, index_width: int) -> int:
    """Narrowest stored width >= ``index_width`` that can hold ``H*W*C``.

    The s_ptr array shares the channel-index width unless the worst-case
    spike count would not fit, in which case it is widened.
    """
    worst = height * width * channels
    for bits in INDEX_WIDTHS:
        if bits >= index_width and worst < (1 << bits):
            return bits
    raise IndexWidthOverflow(f"{height}x{width}x{channels} map exceeds 32-bit s_ptr")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DenseBinaryMap:
    height: int
    width: int
    channels: int
    bits: np.ndarray  # bool, shape (H, W, C)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width, self.channels):
            raise GeometryMismatch(
                f"bits shape {bits.shape} != {(self.height, self.width, self.channels)}"
            )
        object.__setattr__(self, "bits", _frozen(bits))

    @classmethod
    def from_array(cls, bits) -> "DenseBinaryMap":
        bits = np.asarray(bits, dtype=bool)
        return cls(*bits.shape, bits)

    @property
    def nnz(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, DenseBinaryMap):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))


@dataclass(frozen=True, eq=False)
class CompressedSpikeMap:
    """Binary spike map in the pointer + channel-index layout.

    Location ``p = y * W + x`` owns ``c_idcs[s_ptr[p]:s_ptr[p + 1]]``, a
    strictly increasing list of the channels that fired there.
    """

    height: int
    width: int
    channels: int
    s_ptr: np.ndarray
    c_idcs: np.ndarray
    index_width: int = 16

    def __post_init__(self):
        if self.index_width not in INDEX_WIDTHS:
            raise IndexWidthOverflow(f"unsupported index width {self.index_width}")
        if min(self.height, self.width, self.channels) < 0:
            raise MalformedMap("negative dimension")
        if self.channels > (1 << self.index_width):
            raise IndexWidthOverflow(
                f"{self.channels} channels do not fit {self.index_width}-bit indices"
            )
        s_ptr = np.asarray(self.s_ptr, dtype=np.int64)
        c_idcs = np.asarray(self.c_idcs, dtype=np.int64)
        _validate(self.height * self.width, self.channels, s_ptr, c_idcs)
        sw = sptr_width_for(self.height, self.width, self.channels, self.index_width)
        object.__setattr__(self, "s_ptr", _frozen(s_ptr.astype(_UINT[sw])))
        object.__setattr__(self, "c_idcs", _frozen(c_idcs.astype(_UINT[self.index_width])))

    @property
    def n_locations(self) -> int:
        return self.height * self.width

    @property
    def nnz(self) -> int:
        return int(self.c_idcs.shape[0])

    @property
    def sptr_width(self) -> int:
        return self.s_ptr.dtype.itemsize * 8

    def lengths(self) -> np.ndarray:
        return np.diff(self.s_ptr.astype(np.int64))

    def channels_at(self, y: int, x: int) -> np.ndarray:
        p = y * self.width + x
        return self.c_idcs[int(self.s_ptr[p]) : int(self.s_ptr[p + 1])]

    def rows(self, r0: int, r1: int) -> "CompressedSpikeMap":
        """Sub-map holding input rows ``[r0, r1)``, with rebased pointers."""
        if not 0 <= r0 <= r1 <= self.height:
            raise GeometryMismatch(f"row range [{r0}, {r1}) outside 0..{self.height}")
        lo = int(self.s_ptr[r0 * self.width])
        hi = int(self.s_ptr[r1 * self.width])
        s_ptr = self.s_ptr[r0 * self.width : r1 * self.width + 1].astype(np.int64) - lo
        return CompressedSpikeMap(
            r1 - r0, self.width, self.channels, s_ptr, self.c_idcs[lo:hi], self.index_width
        )

    @classmethod
    def vstack(cls, maps) -> "CompressedSpikeMap":
        """Concatenate maps along the height axis."""
        maps = list(maps)
        if not maps:
            raise GeometryMismatch("nothing to stack")
        w, c, iw = maps[0].width, maps[0].channels, maps[0].index_width
        ptrs = [np.zeros(1, np.int64)]
        offset = 0
        for m in maps:
            if (m.width, m.channels) != (w, c):
                raise GeometryMismatch("stacked maps differ in width or channels")
            ptrs.append(m.s_ptr[1:].astype(np.int64) + offset)
            offset += m.nnz
        idcs = np.concatenate([m.c_idcs.astype(np.int64) for m in maps])
        return cls(sum(m.height for m in maps), w, c, np.concatenate(ptrs), idcs, iw)

    def __eq__(self, other):
        if not isinstance(other, CompressedSpikeMap):
            return NotImplemented
        return (
            (self.height, self.width, self.channels, self.index_width)
            == (other.height, other.width, other.channels, other.index_width)
            and np.array_equal(self.s_ptr, other.s_ptr)
            and np.array_equal(self.c_idcs, other.c_idcs)
        )


def _validate(n_loc: int, channels: int, s_ptr: np.ndarray, c_idcs: np.ndarray) -> None:
    if s_ptr.ndim != 1 or s_ptr.shape[0] != n_loc + 1:
        raise MalformedMap(f"s_ptr must have {n_loc + 1} entries, got {s_ptr.shape}")
    if s_ptr[0] != 0:
        raise MalformedMap("s_ptr[0] must be 0")
    if np.any(np.diff(s_ptr) < 0):
        raise MalformedMap("s_ptr is not monotone")
    if s_ptr[-1] != c_idcs.shape[0]:
        raise MalformedMap(f"s_ptr[-1]={s_ptr[-1]} but {c_idcs.shape[0]} indices stored")
    if c_idcs.size == 0:
        return
    if c_idcs.min() < 0 or c_idcs.max() >= channels:
        raise MalformedMap(f"channel index outside [0, {channels})")
    step_ok = np.diff(c_idcs) > 0
    starts = s_ptr[1:-1]
    starts = starts[(starts > 0) & (starts < c_idcs.shape[0])]
    step_ok[starts - 1] = True
    if not step_ok.all():
        raise MalformedMap("per-location channel slice not strictly increasing")


@dataclass(frozen=True, eq=False)
class FcSpikeList:
    size: int
    c_idcs: np.ndarray
    index_width: int = 16

    def __post_init__(self):
        if self.size > (1 << self.index_width):
            raise IndexWidthOverflow(f"{self.size} neurons do not fit {self.index_width}-bit indices")
        idx = np.asarray(self.c_idcs, dtype=np.int64)
        if idx.ndim != 1:
            raise MalformedMap("c_idcs must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= self.size or np.any(np.diff(idx) <= 0)):
            raise MalformedMap("FC indices must be strictly increasing and < size")
        object.__setattr__(self, "c_idcs", _frozen(idx.astype(uint_dtype(self.index_width))))

    @property
    def count(self) -> int:
        return int(self.c_idcs.shape[0])

    nnz = count

    def __eq__(self, other):
        if not isinstance(other, FcSpikeList):
            return NotImplemented
        return (
            (self.size, self.index_width) == (other.size, other.index_width)
            and np.array_equal(self.c_idcs, other.c_idcs)
        )


@dataclass(frozen=True)
class AerEvent:
    x: int
    y: int
    c: int
    t: int


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Real-valued HWC tensor (first-layer currents, membrane potentials)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise GeometryMismatch(f"DenseTensor needs (H, W, C), got shape {v.shape}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """Weights in batched HWC order: ``[k_h][k_w][c_in][group][lane]``.

    One SIMD word packs ``simd_width`` consecutive output channels, so a
    single word fetch feeds every FPU lane. The last group is zero padded.
    """

    k_h: int
    k_w: int
    c_in: int
    c_out: int
    simd_width: int
    words: np.ndarray  # float32, shape (k_h*k_w*c_in*groups, simd_width)
    word_bytes: int = 8

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.float32)
        expect = (self.k_h * self.k_w * self.c_in * self.groups, self.simd_width)
        if words.shape != expect:
            raise GeometryMismatch(f"weight words shape {words.shape} != {expect}")
        object.__setattr__(self, "words", _frozen(words))

    @property
    def groups(self) -> int:
        return -(-self.c_out // self.simd_width)

    @property
    def n_words(self) -> int:
        return self.words.shape[0]

    @property
    def nbytes(self) -> int:
        return self.n_words * self.word_bytes

    def word_index(self, ky: int, kx: int, c: int, g: int) -> int:
        return ((ky * self.k_w + kx) * self.c_in + c) * self.groups + g

    def word(self, ky: int, kx: int, c: int, g: int) -> np.ndarray:
        return self.words[self.word_index(ky, kx, c, g)]

    @classmethod
    def from_dense(cls, w, simd_width: int, word_bytes: int = 8) -> "WeightTensor":
        """Pack a ``(k_h, k_w, c_in, c_out)`` array. A 2-D ``(c_in, c_out)`` array is a 1x1 kernel."""
        w = np.asarray(w, dtype=np.float32)
        if w.ndim == 2:
            w = w[None, None]
        if w.ndim != 4:
            raise GeometryMismatch(f"dense weights need 4 dims, got {w.shape}")
        k_h, k_w, c_in, c_out = w.shape
        groups = -(-c_out // simd_width)
        padded = np.zeros((k_h, k_w, c_in, groups * simd_width), np.float32)
        padded[..., :c_out] = w
        words = padded.reshape(k_h * k_w * c_in * groups, simd_width)
        return cls(k_h, k_w, c_in, c_out, simd_width, words, word_bytes)

    def to_dense(self) -> np.ndarray:
        full = self.words.reshape(self.k_h, self.k_w, self.c_in, self.groups * self.simd_width)
        return full[..., : self.c_out].copy()

    def as_matrix(self) -> np.ndarray:
        """``(k_h*k_w*c_in, c_out)`` view in im2row column order."""
        return self.to_dense().reshape(-1, self.c_out)


# ---------------------------------------------------------------------------
# conversions

def compress(dense: DenseBinaryMap, index_width: int = 16) -> CompressedSpikeMap:
    if dense.channels > (1 << index_width):
        raise IndexWidthOverflow(
            f"{dense.channels} channels do not fit {index_width}-bit indices"
        )
    flat = dense.bits.reshape(dense.height * dense.width, dense.channels)
    s_ptr = np.zeros(flat.shape[0] + 1, np.int64)
    np.cumsum(flat.sum(axis=1), out=s_ptr[1:])
    # nonzero walks row-major, so each location's channels come out ascending
    c_idcs = np.nonzero(flat)[1]
    return CompressedSpikeMap(dense.height, dense.width, dense.channels, s_ptr, c_idcs, index_width)


def decompress(m: CompressedSpikeMap) -> DenseBinaryMap:
    if not isinstance(m, CompressedSpikeMap):
        raise MalformedMap(f"expected CompressedSpikeMap, got {type(m).__name__}")
    flat = np.zeros((m.n_locations, m.channels), bool)
    loc = np.repeat(np.arange(m.n_locations), m.lengths())
    flat[loc, m.c_idcs.astype(np.int64)] = True
    return DenseBinaryMap(m.height, m.width, m.channels, flat.reshape(m.height, m.width, m.channels))


def compress_fc(bits, index_width: int = 16) -> FcSpikeList:
    bits = np.asarray(bits, dtype=bool).ravel()
    if bits.size > (1 << index_width):
        raise IndexWidthOverflow(f"{bits.size} neurons do not fit {index_width}-bit indices")
    return FcSpikeList(bits.size, np.flatnonzero(bits), index_width)


def decompress_fc(spikes: FcSpikeList) -> np.ndarray:
    out = np.zeros(spikes.size, bool)
    out[spikes.c_idcs.astype(np.int64)] = True
    return out


def flatten_to_fc(m: CompressedSpikeMap, index_width: int | None = None) -> FcSpikeList:
    """HWC-flatten a conv spike map into an FC input list."""
    loc = np.repeat(np.arange(m.n_locations, dtype=np.int64), m.lengths())
    idx = loc * m.channels + m.c_idcs.astype(np.int64)
    size = m.n_locations * m.channels
    if index_width is None:
        index_width = next(b for b in INDEX_WIDTHS if b >= m.index_width and size <= (1 << b))
    return FcSpikeList(size, idx, index_width)


def to_aer(m: CompressedSpikeMap, t: int = 0) -> list[AerEvent]:
    loc = np.repeat(np.arange(m.n_locations), m.lengths())
    return [
        AerEvent(int(p % m.width), int(p // m.width), int(c), t)
        for p, c in zip(loc, m.c_idcs)
    ]


# ---------------------------------------------------------------------------
# footprint accounting

SpikeData = Union[CompressedSpikeMap, FcSpikeList]


def footprint_csr(m: SpikeData) -> int:
    """Bytes needed to store ``m`` at its actual stored widths."""
    if isinstance(m, FcSpikeList):
        # index array plus one count word
        return (m.count + 1) * m.index_width // 8
    return (m.s_ptr.shape[0] * m.sptr_width + m.nnz * m.index_width) // 8


def footprint_aer(m: SpikeData, field_bits: int = 16, fields_per_event: int = 4) -> int:
    """Bytes for the same spikes as AER events (x, y, c, t by default)."""
    if fields_per_event < 1:
        raise ValueError("fields_per_event must be >= 1")
    return m.nnz * fields_per_event * field_bits // 8
