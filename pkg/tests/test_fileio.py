import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikestream.errors import FormatError
from spikestream.fileio import parse_sdns, parse_sspk, read_sspk, sdns_bytes, sspk_bytes, write_sspk
from spikestream.formats import DenseBinaryMap, compress

prop = settings.get_profile("property")


def test_empty_map_is_header_plus_zero_pointers(tmp_path):
    m = compress(DenseBinaryMap.from_array(np.zeros((2, 3, 4), bool)))
    path = tmp_path / "e.sspk"
    write_sspk(path, m)
    raw = path.read_bytes()
    header = struct.calcsize("<4sHIIIBQ")
    assert len(raw) == header + 7 * 2
    assert raw[:4] == b"SSPK"
    assert read_sspk(path) == m


@prop
@given(arrays(bool, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 300))),
       st.sampled_from([16, 32]))
def test_sspk_roundtrip(bits, iw):
    m = compress(DenseBinaryMap.from_array(bits), iw)
    assert parse_sspk(sspk_bytes(m)) == m


@prop
@given(st.sampled_from(["<f4", "<f2", "<f8", "<u1", "<i4"]),
       st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
def test_sdns_roundtrip(dtype, shape, data):
    values = data.draw(arrays(np.dtype(dtype), tuple(shape)))
    out = parse_sdns(sdns_bytes(values, dtype))
    assert out.dtype == np.dtype(dtype)
    assert out.tobytes() == values.tobytes()


def test_corrupt_files_rejected():
    m = compress(DenseBinaryMap.from_array(np.ones((2, 2, 2), bool)))
    raw = sspk_bytes(m)
    with pytest.raises(FormatError):
        parse_sspk(b"XSPK" + raw[4:])
    with pytest.raises(FormatError):
        parse_sspk(raw[:-1])
    with pytest.raises(FormatError):
        parse_sspk(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(FormatError):
        parse_sspk(raw[:10])
    dense = sdns_bytes(np.zeros((2, 2), np.float32))
    with pytest.raises(FormatError):
        parse_sdns(dense[:-2])
    with pytest.raises(FormatError):
        parse_sdns(b"NOPE" + dense[4:])
