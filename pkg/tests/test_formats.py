import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import aer_bytes, csr_bytes
from spikestream.errors import GeometryMismatch, IndexWidthOverflow, MalformedMap
from spikestream.formats import (
    CompressedSpikeMap,
    DenseBinaryMap,
    DenseTensor,
    FcSpikeList,
    WeightTensor,
    compress,
    compress_fc,
    decompress,
    decompress_fc,
    flatten_to_fc,
    footprint_aer,
    footprint_csr,
    sptr_width_for,
    to_aer,
)

prop = settings.get_profile("property")


@st.composite
def binary_maps(draw, max_hw=6, max_c=40):
    h = draw(st.integers(1, max_hw))
    w = draw(st.integers(1, max_hw))
    c = draw(st.integers(1, max_c))
    bits = draw(arrays(bool, (h, w, c)))
    return bits


def test_empty_map_pointers_all_zero():
    m = compress(DenseBinaryMap.from_array(np.zeros((3, 4, 5), bool)))
    assert m.nnz == 0
    assert m.s_ptr.tolist() == [0] * 13


def test_single_spike_layout():
    bits = np.zeros((2, 2, 8), bool)
    bits[1, 0, 5] = True
    m = compress(DenseBinaryMap.from_array(bits))
    assert m.s_ptr.tolist() == [0, 0, 0, 1, 1]
    assert m.c_idcs.tolist() == [5]
    assert m.channels_at(1, 0).tolist() == [5]


def test_sptr_width_follows_worst_case_count():
    assert sptr_width_for(4, 4, 8, 8) == 8          # 128 < 256
    assert sptr_width_for(4, 4, 16, 8) == 16        # 256 does not fit u8
    assert sptr_width_for(32, 32, 64, 16) == 32     # 65536 does not fit u16
    with pytest.raises(IndexWidthOverflow):
        sptr_width_for(1 << 12, 1 << 12, 1 << 10, 16)


def test_index_width_overflow_on_wide_channels():
    with pytest.raises(IndexWidthOverflow):
        compress(DenseBinaryMap.from_array(np.zeros((1, 1, 300), bool)), index_width=8)


@pytest.mark.parametrize("s_ptr,c_idcs", [
    ([0, 2, 1], [0, 1]),          # decreasing pointers
    ([0, 2, 3], [1, 1, 0]),       # repeated channel inside a location
    ([0, 1, 2], [0, 9]),          # channel out of range
    ([1, 1, 2], [0, 1]),          # does not start at zero
    ([0, 1], [0]),                # wrong pointer length
])
def test_malformed_maps_rejected(s_ptr, c_idcs):
    with pytest.raises(MalformedMap):
        CompressedSpikeMap(1, 2, 4, np.array(s_ptr), np.array(c_idcs), 16)


def test_arrays_are_frozen():
    m = compress(DenseBinaryMap.from_array(np.ones((2, 2, 2), bool)))
    with pytest.raises(ValueError):
        m.c_idcs[0] = 1


@prop
@given(binary_maps(), st.sampled_from([8, 16, 32]))
def test_roundtrip_and_canonical_form(bits, iw):
    m = compress(DenseBinaryMap.from_array(bits), iw)
    assert decompress(m) == DenseBinaryMap.from_array(bits)
    assert m.nnz == int(bits.sum())
    assert m.sptr_width == sptr_width_for(*bits.shape, iw)
    for p in range(m.n_locations):
        sl = m.c_idcs[int(m.s_ptr[p]):int(m.s_ptr[p + 1])].astype(np.int64)
        assert np.all(np.diff(sl) > 0)


@prop
@given(binary_maps(), st.sampled_from([8, 16, 32]), st.integers(1, 3), st.integers(1, 4))
def test_footprints_match_closed_forms(bits, iw, field_bytes, fields):
    m = compress(DenseBinaryMap.from_array(bits), iw)
    h, w, c = bits.shape
    assert footprint_csr(m) == csr_bytes(h, w, c, int(bits.sum()), iw)
    assert footprint_aer(m, 8 * field_bytes, fields) == aer_bytes(int(bits.sum()), 8 * field_bytes, fields)
    assert footprint_aer(m) == 8 * m.nnz


@prop
@given(binary_maps(max_hw=5), st.data())
def test_rows_and_vstack_partition(bits, data):
    m = compress(DenseBinaryMap.from_array(bits))
    cut = data.draw(st.integers(0, bits.shape[0]))
    top, bottom = m.rows(0, cut), m.rows(cut, bits.shape[0])
    assert decompress(top).bits.tolist() == bits[:cut].tolist()
    parts = [p for p in (top, bottom) if p.height]
    assert CompressedSpikeMap.vstack(parts) == m


@prop
@given(binary_maps(max_hw=4, max_c=16))
def test_flatten_to_fc_uses_hwc_order(bits):
    m = compress(DenseBinaryMap.from_array(bits))
    fc = flatten_to_fc(m)
    assert fc.size == bits.size
    assert np.array_equal(decompress_fc(fc), bits.ravel())


@prop
@given(arrays(bool, st.integers(1, 300)))
def test_fc_roundtrip_and_footprint(bits):
    fc = compress_fc(bits)
    assert np.array_equal(decompress_fc(fc), bits)
    assert footprint_csr(fc) == (int(bits.sum()) + 1) * 2


def test_fc_list_validation():
    with pytest.raises(MalformedMap):
        FcSpikeList(8, np.array([3, 1]))
    with pytest.raises(MalformedMap):
        FcSpikeList(8, np.array([8]))


def test_aer_events_carry_coordinates():
    bits = np.zeros((2, 3, 4), bool)
    bits[1, 2, 3] = bits[0, 1, 0] = True
    ev = to_aer(compress(DenseBinaryMap.from_array(bits)), t=7)
    assert [(e.x, e.y, e.c, e.t) for e in ev] == [(1, 0, 0, 7), (2, 1, 3, 7)]


def test_weight_layout_word_index():
    w = np.arange(2 * 2 * 3 * 10, dtype=np.float32).reshape(2, 2, 3, 10)
    wt = WeightTensor.from_dense(w, simd_width=4)
    assert wt.groups == 3
    assert wt.word_index(1, 0, 2, 1) == ((1 * 2 + 0) * 3 + 2) * 3 + 1
    assert wt.word(1, 0, 2, 1).tolist() == w[1, 0, 2, 4:8].tolist()
    # last group zero padded
    assert wt.word(0, 0, 0, 2).tolist() == [8.0, 9.0, 0.0, 0.0]
    assert np.array_equal(wt.to_dense(), w)
    assert wt.nbytes == wt.n_words * 8
    assert wt.as_matrix().shape == (12, 10)


def test_dense_tensor_shape_check():
    with pytest.raises(GeometryMismatch):
        DenseTensor(np.zeros((2, 2)))
