import ml_dtypes
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import geometric_v, lif_scalar
from spikestream.kernels import OfmapBuilder
from spikestream.neuron import LifParams, act_fun_simd, lif_update, precision

prop = settings.get_profile("property")
finite = st.floats(-1e4, 1e4, allow_nan=False, width=32)


def test_threshold_tie_fires_and_resets_by_subtraction():
    p = LifParams(alpha=1.0, v_th=1.0, v_rst=1.0)
    v, s = lif_update(0.5, 0.5, p)
    assert s and v == 0.0
    v, s = lif_update(0.5, 0.25, p)
    assert not s and v == np.float32(0.75)


def test_decay_only_step():
    v, s = lif_update(np.float32(2.0), 0.0, LifParams(alpha=0.5, v_th=4.0))
    assert v == 1.0 and not s


@pytest.mark.parametrize("bad", [dict(alpha=1.5), dict(alpha=-0.1), dict(v_th=0.0)])
def test_invalid_params(bad):
    with pytest.raises(ValueError):
        LifParams(**bad)


@prop
@given(finite, finite, st.floats(0, 1), st.floats(0.01, 100), st.floats(0, 100), st.floats(0, 4))
def test_lif_matches_scalar_oracle(v, i, alpha, v_th, v_rst, r):
    p = LifParams(alpha, v_th, v_rst, r)
    got_v, got_s = lif_update(v, i, p)
    want_v, want_s = lif_scalar(v, i, alpha, v_th, v_rst, r)
    assert got_s == want_s
    assert got_v == want_v or (np.isnan(got_v) and np.isnan(want_v))


@prop
@given(st.floats(0.0, 0.2), st.floats(0.0, 0.99), st.integers(1, 60))
def test_subthreshold_geometric_convergence(c, alpha, t):
    # c/(1-alpha) < v_th guarantees silence; v follows the geometric series
    p = LifParams(alpha=alpha, v_th=1.0 / (1 - alpha) * 0.2 + 1.0)
    v = np.float32(0)
    for _ in range(t):
        v, s = lif_update(v, c, p)
        assert not s
    assert abs(float(v) - geometric_v(c, alpha, t)) <= 1e-5 * t + 1e-6


def test_act_fun_masks_tail_lanes():
    out = OfmapBuilder(1, 1, 6)
    v = np.zeros(4, np.float32)
    i = np.array([2.0, 0.0, 3.0, 5.0], np.float32)
    # group 1 covers channels 4..7; only 4 and 5 exist
    res = act_fun_simd(v, i, LifParams(), 0, 1, out)
    assert out.segments[0, :out.counts[0]].tolist() == [4]
    assert res.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_act_fun_appends_in_lane_order():
    out = OfmapBuilder(2, 1, 8)
    act_fun_simd(np.zeros(4, np.float32), np.array([1, 0, 1, 1], np.float32), LifParams(), 1, 0, out)
    assert out.counts.tolist() == [0, 3]
    assert out.segments[1, :3].tolist() == [0, 2, 3]


def test_precision_widths_and_rounding():
    assert [precision(n).simd_width for n in ("fp32", "fp16", "fp8")] == [2, 4, 8]
    x = np.float32(1.0009765625 + 2 ** -12)
    assert precision("fp16").round(x) == x  # non-strict keeps fp32 arithmetic
    assert precision("fp16", strict=True).round(x) == np.float32(np.float16(x))
    assert precision("fp8", strict=True).round(np.float32(1.1)) == np.float32(ml_dtypes.float8_e5m2(1.1))
    with pytest.raises(ValueError):
        precision("bf16")


@prop
@given(st.floats(-100, 100, width=32), st.floats(-100, 100, width=32))
def test_strict_fp16_state_is_representable(v, i):
    prec = precision("fp16", strict=True)
    nv, _ = lif_update(v, i, LifParams(0.75, 2.0, 2.0), prec)
    assert np.float32(np.float16(nv)) == nv
