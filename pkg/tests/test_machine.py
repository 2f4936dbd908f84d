import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import affine_addresses
from spikestream.errors import OutOfSpm, SlotCapability, SpmWriteConflict, StreamExhausted
from spikestream.machine import (
    AffineStreamDesc,
    CoreState,
    IndirectStreamDesc,
    Spm,
    frep,
    indirect_gather_addresses,
    sr_commit,
    sr_configure,
    sr_read,
    sr_write,
)
from spikestream.perf import CostParams

prop = settings.get_profile("property")

dims_st = st.lists(st.tuples(st.integers(0, 64).map(lambda s: 8 * s), st.integers(0, 5)),
                   min_size=1, max_size=4)


def _core(n_words=512):
    spm = Spm()
    spm.alloc("w", np.arange(n_words, dtype=np.float32), 8)
    return CoreState(0, spm)


@prop
@given(st.integers(0, 64).map(lambda b: 8 * b), dims_st)
def test_affine_stream_matches_nested_loops(base, dims):
    d = AffineStreamDesc(base, tuple(dims))
    assert d.addresses().tolist() == affine_addresses(base, dims)
    assert d.setup_fields == 1 + 2 * len(dims)


@prop
@given(st.lists(st.integers(0, 63), max_size=40), st.sampled_from([8, 16, 32]), st.integers(0, 3))
def test_indirect_stream_gathers_by_index(idx, iw, shift_extra):
    spm = Spm()
    shift = 3 + shift_extra
    values = np.arange(64 << shift_extra, dtype=np.float32)
    vbase = spm.alloc("v", values, 8)
    ibase = spm.alloc("i", np.array(idx, np.int64), iw // 8)
    core = CoreState(0, spm)
    got = []
    if idx:
        sr_configure(core, 1, IndirectStreamDesc(vbase, ibase, iw, len(idx), shift))
        got = [float(sr_read(core, 1)) for _ in idx]
    want = [float(values[i << shift_extra]) for i in idx]
    assert got == want
    batch = indirect_gather_addresses(spm, [vbase], [ibase], [len(idx)], iw, shift)
    assert batch.tolist() == [vbase + (i << shift) for i in idx]


@prop
@given(st.integers(0, 6), st.integers(1, 5))
def test_reading_past_bound_raises_and_leaves_state(bound, extra):
    core = _core()
    sr_configure(core, 2, AffineStreamDesc(0, ((8, bound),)))
    for _ in range(bound):
        sr_read(core, 2)
    before = core.ledger.counters(), core.slots[2].pos
    for _ in range(extra):
        with pytest.raises(StreamExhausted):
            sr_read(core, 2)
    assert (core.ledger.counters(), core.slots[2].pos) == before


def test_slot_two_is_affine_only():
    core = _core()
    with pytest.raises(SlotCapability):
        sr_configure(core, 2, IndirectStreamDesc(0, 0, 16, 1))
    with pytest.raises(SlotCapability):
        sr_configure(core, 3, AffineStreamDesc(0, ((8, 1),)))


def test_stream_outside_spm_rejected():
    core = _core()
    with pytest.raises(OutOfSpm):
        sr_configure(core, 0, AffineStreamDesc(core.spm.capacity - 8, ((8, 2),)))


def test_unmapped_and_misaligned_access():
    core = _core(4)
    with pytest.raises(OutOfSpm):
        core.spm.load(1000)
    with pytest.raises(OutOfSpm):
        core.spm.load(3)
    with pytest.raises(OutOfSpm):
        Spm(64).alloc("big", np.zeros(9), 8)


def test_cross_core_write_conflict_detected():
    spm = Spm()
    spm.alloc("o", np.zeros(4), 8)
    a, b = CoreState(0, spm), CoreState(1, spm)
    a.store(8, 1.0)
    a.store(8, 2.0)
    with pytest.raises(SpmWriteConflict):
        b.store(8, 3.0)
    spm.barrier()
    b.store(8, 3.0)


def test_write_stream():
    core = _core(8)
    sr_configure(core, 0, AffineStreamDesc(16, ((8, 3),), direction="write"))
    for x in (7.0, 8.0, 9.0):
        sr_write(core, 0, x)
    assert core.spm.region("w").data[2:5].tolist() == [7.0, 8.0, 9.0]
    with pytest.raises(SlotCapability):
        sr_read(core, 0)


def test_shadow_commit_swaps_atomically():
    core = _core()
    sr_configure(core, 0, AffineStreamDesc(0, ((8, 2),)))
    sr_configure(core, 0, AffineStreamDesc(80, ((8, 2),)), shadow=True)
    assert float(sr_read(core, 0)) == 0.0  # live stream unaffected by staging
    sr_commit(core, 0)
    assert float(sr_read(core, 0)) == 10.0
    with pytest.raises(StreamExhausted):
        sr_commit(core, 0)


def test_frep_and_setup_costs():
    core = _core()
    sr_configure(core, 0, IndirectStreamDesc(0, 0, 16, 0))
    core.close_phase()
    assert core.ledger.int_cycles == 3 and core.ledger.stream_setup_cycles == 3
    frep(core, 2, 10, lambda: None)
    core.close_phase()
    assert core.ledger.int_cycles == 4
    assert core.ledger.fp_total_cycles == 20 == core.ledger.fp_useful_cycles
    with pytest.raises(ValueError):
        frep(core, 1, 0, lambda: None)


def test_sr_set_cost_is_configurable():
    core = CoreState(0, Spm(), CostParams(sr_set=3))
    sr_configure(core, 0, AffineStreamDesc(0, ((8, 1), (8, 1))))
    core.close_phase()
    assert core.ledger.int_cycles == 15


def test_phase_max_law():
    core = _core()
    core.int_op(100)
    core.fp_op(700, useful=True)
    assert core.close_phase() == 700
