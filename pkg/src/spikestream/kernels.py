"""Layer kernels: compressed conv and FC layers built on sparse-dense vector
accumulation (SpVA), plus the dense spike-encoding first layer.

Two code variants exist for every layer:

``baseline``
    explicit loads: each SpVA element costs ``lw, slli, add, fld, addi,
    addi, bne`` on the integer pipe plus one ``fadd`` on the FPU.
``streamed``
    an indirect stream register gathers the weights and an ``frep`` loop
    accumulates them; the integer core only programs the stream.

Two engines execute them:

``step``
    drives :mod:`spikestream.machine` one instruction at a time. Slow,
    but every cycle is debited by the instruction that causes it.
``batch``
    vectorized numerics over a whole pass with closed-form cycle counts.
    It must agree with ``step`` bit for bit (numerics and ledgers); the
    test suite checks this on random layers.

Work is distributed by an atomic cursor: whichever core is free first
claims the next receptive field (RF). Within an RF the order is output
channel group, then kernel position, then stream element.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import BufferOverflow, DoubleUpdate, GeometryMismatch
from .formats import (
    CompressedSpikeMap,
    DenseTensor,
    FcSpikeList,
    WeightTensor,
    sptr_width_for,
)
from .machine import (
    SPM_CAPACITY,
    AffineStreamDesc,
    CoreState,
    IndirectStreamDesc,
    Spm,
    frep,
    indirect_gather_addresses,
    sr_commit,
    sr_configure,
    sr_read,
)
from .neuron import F32, LifParams, Precision, act_fun_simd, lif_update
from .perf import CoreLedger, CostLedger, CostParams, PassTiming

VARIANTS = ("baseline", "streamed")
ENGINES = ("batch", "step")
POLICIES = ("steal", "static")

# fixed per-step instruction mixes (counts, not cycles)
ACT_FP_OPS = 5  # decay, integrate, compare, mask convert, reset


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


# ---------------------------------------------------------------------------
# layer descriptors

@dataclass(frozen=True)
class ConvLayerDesc:
    if_h: int
    if_w: int
    c_in: int
    c_out: int
    k_h: int = 3
    k_w: int = 3
    stride: int = 1
    lif: LifParams = field(default_factory=LifParams)
    simd_width: int = 4
    variant: str = "streamed"

    def __post_init__(self):
        _check_variant(self.variant)
        if min(self.k_h, self.k_w, self.stride, self.c_out, self.simd_width) < 1:
            raise GeometryMismatch("kernel, stride, c_out and simd_width must be >= 1")
        if self.k_h > self.if_h or self.k_w > self.if_w:
            raise GeometryMismatch(f"{self.k_h}x{self.k_w} kernel larger than {self.if_h}x{self.if_w} input")
        if (self.if_h - self.k_h) % self.stride or (self.if_w - self.k_w) % self.stride:
            raise GeometryMismatch(
                f"stride {self.stride} does not tile {self.if_h}x{self.if_w} with a "
                f"{self.k_h}x{self.k_w} kernel (no padding)"
            )

    @property
    def of_h(self) -> int:
        return (self.if_h - self.k_h) // self.stride + 1

    @property
    def of_w(self) -> int:
        return (self.if_w - self.k_w) // self.stride + 1

    @property
    def groups(self) -> int:
        return -(-self.c_out // self.simd_width)

    def with_rows(self, in_rows: int) -> "ConvLayerDesc":
        return ConvLayerDesc(in_rows, self.if_w, self.c_in, self.c_out, self.k_h, self.k_w,
                             self.stride, self.lif, self.simd_width, self.variant)


# ---------------------------------------------------------------------------
# scheduling

class RfCursor:
    """Shared atomic work counter (fetch-and-add) with a claim log."""

    def __init__(self, n_items: int):
        self.n_items = n_items
        self.next_rf = 0
        self.claims: list[tuple[int, int]] = []  # (item, core)

    def claim(self, core: int) -> int | None:
        if self.next_rf >= self.n_items:
            return None
        item = self.next_rf
        self.next_rf += 1
        self.claims.append((item, core))
        return item

    def audit(self) -> None:
        seen = np.zeros(self.n_items, np.int64)
        for item, _ in self.claims:
            seen[item] += 1
        if np.any(seen > 1):
            raise DoubleUpdate(f"items claimed twice: {np.flatnonzero(seen > 1)[:8].tolist()}")
        if np.any(seen == 0):
            raise DoubleUpdate(f"items never claimed: {np.flatnonzero(seen == 0)[:8].tolist()}")

    def per_core(self, n_cores: int) -> np.ndarray:
        counts = np.zeros(n_cores, np.int64)
        for _, core in self.claims:
            counts[core] += 1
        return counts


class _StaticCursor(RfCursor):
    """Contiguous block partitioning; no stealing."""

    def __init__(self, n_items: int, n_cores: int):
        super().__init__(n_items)
        block = -(-n_items // n_cores) if n_items else 0
        self._next = {c: c * block for c in range(n_cores)}
        self._end = {c: min((c + 1) * block, n_items) for c in range(n_cores)}

    def claim(self, core: int) -> int | None:
        item = self._next[core]
        if item >= self._end[core]:
            return None
        self._next[core] = item + 1
        self.claims.append((item, core))
        return item


def run_schedule(n_items: int, ledgers: list[CoreLedger], run_item, policy: str = "steal") -> RfCursor:
    """Drive the cores until the work runs out.

    The core with the least elapsed time claims next (ties go to the
    lower core id), which is a deterministic interleaving of the cores'
    fetch-and-add operations. ``run_item(core, item)`` executes an item
    and debits ``ledgers[core]``.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    n_cores = len(ledgers)
    cursor = RfCursor(n_items) if policy == "steal" else _StaticCursor(n_items, n_cores)
    heap = [(ledgers[c].busy_cycles, c) for c in range(n_cores)]
    heapq.heapify(heap)
    while heap:
        _, core = heapq.heappop(heap)
        item = cursor.claim(core)
        if item is None:
            continue
        run_item(core, item)
        ledgers[core].items += 1
        heapq.heappush(heap, (ledgers[core].busy_cycles, core))
    cursor.audit()
    return cursor


# ---------------------------------------------------------------------------
# output builder

class OfmapBuilder:
    """Worst-case sized per-location output buffers with atomic cursors.

    Each location reserves ``capacity`` (default: all channels) index
    slots, so no sparsity pattern can overflow it.
    """

    def __init__(self, height: int, width: int, channels: int,
                 capacity: int | None = None, index_width: int = 16):
        self.height, self.width, self.channels = height, width, channels
        self.capacity = channels if capacity is None else capacity
        self.index_width = index_width
        self.segments = np.zeros((height * width, self.capacity), np.int64)
        self.counts = np.zeros(height * width, np.int64)

    @property
    def n_locations(self) -> int:
        return self.height * self.width

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def append(self, location: int, channel: int) -> int:
        slot = int(self.counts[location])
        if slot >= self.capacity:
            raise BufferOverflow(f"location {location} exceeds {self.capacity} output slots")
        self.segments[location, slot] = channel
        self.counts[location] = slot + 1
        return slot

    def extend(self, locations, channels) -> None:
        """Append many spikes; order is preserved within each location."""
        locations = np.asarray(locations, np.int64)
        channels = np.asarray(channels, np.int64)
        if locations.size == 0:
            return
        order = np.argsort(locations, kind="stable")
        loc_sorted = locations[order]
        first = np.r_[True, loc_sorted[1:] != loc_sorted[:-1]]
        run_start = np.maximum.accumulate(np.where(first, np.arange(loc_sorted.size), 0))
        rank = np.arange(loc_sorted.size) - run_start
        slots = self.counts[loc_sorted] + rank
        if np.any(slots >= self.capacity):
            bad = int(loc_sorted[np.argmax(slots >= self.capacity)])
            raise BufferOverflow(f"location {bad} exceeds {self.capacity} output slots")
        self.segments[loc_sorted, slots] = channels[order]
        np.add.at(self.counts, loc_sorted, 1)

    def segment_bytes(self) -> np.ndarray:
        return self.counts * (self.index_width // 8)


def join_sptr(builder: OfmapBuilder) -> CompressedSpikeMap:
    """Prefix-sum the per-location counts and compact the segments.

    Each location's indices are sorted, which canonicalizes appends that
    arrived from several cores or weight passes.
    """
    counts = builder.counts
    s_ptr = np.zeros(counts.size + 1, np.int64)
    np.cumsum(counts, out=s_ptr[1:])
    if builder.capacity == 0 or counts.sum() == 0:
        c_idcs = np.zeros(0, np.int64)
    else:
        cols = np.arange(builder.capacity)[None, :]
        valid = cols < counts[:, None]
        big = np.iinfo(np.int64).max
        ordered = np.sort(np.where(valid, builder.segments, big), axis=1)
        c_idcs = ordered[cols < counts[:, None]]
    return CompressedSpikeMap(builder.height, builder.width, builder.channels,
                              s_ptr, c_idcs, builder.index_width)


def ofmap_index_width(channels: int, preferred: int = 16) -> int:
    for bits in (8, 16, 32):
        if bits >= preferred and channels <= (1 << bits):
            return bits
    raise GeometryMismatch(f"{channels} channels exceed 32-bit indices")


# ---------------------------------------------------------------------------
# SpVA

def spva_baseline(core: CoreState, idcs_base: int, length: int, w_base: int, acc,
                  *, index_width: int = 16, element_shift: int = 3, prec: Precision | None = None):
    """Explicit-load SpVA: ``acc + sum(w[idcs[j]])`` over ``length`` indices."""
    ib = index_width // 8
    acc = np.asarray(acc, F32)
    for j in range(length):
        idx = int(core.load(idcs_base + j * ib))   # lw
        core.int_op(2)                              # slli, add
        word = core.load(w_base + (idx << element_shift))  # fld
        core.int_op(2)                              # addi, addi
        core.fp_op(useful=True, kind="fadd")        # fadd
        acc = _accumulate(acc, word, prec)
        core.branch()                               # bne
    return acc


def spva_streamed(core: CoreState, idcs_base: int, length: int, w_base: int, acc,
                  *, index_width: int = 16, element_shift: int = 3, slot: int = 0,
                  prec: Precision | None = None):
    """Indirect-stream SpVA. Skipped entirely when ``length == 0``."""
    acc = np.asarray(acc, F32)
    if length == 0:
        return acc
    desc = IndirectStreamDesc(w_base, idcs_base, index_width, length, element_shift)
    sr_configure(core, slot, desc, shadow=True)
    sr_commit(core, slot)
    box = [acc]

    def body():
        box[0] = _accumulate(box[0], sr_read(core, slot), prec)

    frep(core, 1, length, body)
    return box[0]


# ---------------------------------------------------------------------------
# closed-form cost model (batch engine)

class _Costs:
    """Vectorized per-phase accounting mirroring the step engine's instruction mix."""

    def __init__(self, params: CostParams, shape):
        self.p = params
        self.extra = params.conflict_penalty - 1.0
        z = lambda: np.zeros(shape, np.int64)  # noqa: E731
        self.int_cycles, self.fp_total, self.fp_useful = z(), z(), z()
        self.instrs, self.setup, self.unpack, self.busy = z(), z(), z(), z()

    def phase(self, int_c=0, fp_c=0, useful=0, instrs=0, mem_int=0, mem_fp=0, setup=0, unpack=0):
        int_c = int_c + np.ceil(np.asarray(mem_int) * self.extra).astype(np.int64)
        fp_c = fp_c + np.ceil(np.asarray(mem_fp) * self.extra).astype(np.int64)
        self.int_cycles += int_c
        self.fp_total += fp_c
        self.fp_useful += useful
        self.instrs += instrs
        self.setup += setup
        self.unpack += unpack
        self.busy += np.maximum(int_c, fp_c)

    def reduce(self, axes) -> "_Costs":
        out = object.__new__(_Costs)
        out.p, out.extra = self.p, self.extra
        for name in ("int_cycles", "fp_total", "fp_useful", "instrs", "setup", "unpack", "busy"):
            setattr(out, name, getattr(self, name).sum(axis=axes) if axes else getattr(self, name))
        return out

    def debit(self, ledger: CoreLedger, i) -> None:
        ledger.int_cycles += int(self.int_cycles[i])
        ledger.fp_total_cycles += int(self.fp_total[i])
        ledger.fp_useful_cycles += int(self.fp_useful[i])
        ledger.instructions_retired += int(self.instrs[i])
        ledger.stream_setup_cycles += int(self.setup[i])
        ledger.unpack_cycles += int(self.unpack[i])
        ledger.busy_cycles += int(self.busy[i])


def _claim_phase(c: _Costs):
    p = c.p
    c.phase(int_c=p.amo + 2 * p.int_op + p.branch, instrs=4, mem_int=1)


def _group_setup_phase(c: _Costs):
    p = c.p
    c.phase(int_c=p.int_op + p.load, fp_c=p.fp_op, instrs=3, mem_int=1)


def _spva_phase(c: _Costs, n, variant: str, ctl_int, ctl_instrs, ctl_mem):
    """One kernel position: control for the position plus its SpVA."""
    p = c.p
    n = np.asarray(n, np.int64)
    if variant == "baseline":
        per = 2 * p.load + 4 * p.int_op + p.branch
        c.phase(int_c=ctl_int + n * per, fp_c=n * p.fadd, useful=n * p.fadd,
                instrs=ctl_instrs + 8 * n, mem_int=ctl_mem + 2 * n)
    else:
        on = (n > 0).astype(np.int64)
        setup = 3 * p.sr_set
        c.phase(int_c=ctl_int + on * (setup + p.frep), fp_c=n * p.fadd, useful=n * p.fadd,
                instrs=ctl_instrs + on * 4 + n, mem_int=ctl_mem, mem_fp=n, setup=on * setup)


def _act_phases(c: _Costs, lanes, spikes):
    p = c.p
    c.phase(fp_c=ACT_FP_OPS * p.fp_op, instrs=ACT_FP_OPS)
    unpack = lanes * (p.int_op + p.branch) + spikes * (p.amo + p.int_op + p.store)
    c.phase(int_c=p.int_op + p.store + unpack, instrs=2 + 2 * lanes + 3 * spikes,
            mem_int=1 + 2 * spikes, unpack=unpack)


def _conv_ctl(p: CostParams):
    # row select branch + coo arithmetic (3) + two s_ptr loads + s_len
    return p.branch + 4 * p.int_op + 2 * p.load, 7, 2


def _fc_ctl(p: CostParams):
    return p.load + p.branch, 2, 1


# ---------------------------------------------------------------------------
# shared helpers

def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _lane_valid(c_out: int, simd: int, g0: int, g1: int) -> np.ndarray:
    ch = (np.arange(g0, g1)[:, None] * simd) + np.arange(simd)[None, :]
    return ch < c_out


def _to_words(v2d: np.ndarray, simd: int, g0: int, g1: int) -> np.ndarray:
    n_loc, c_out = v2d.shape
    full = np.zeros((n_loc, g1 * simd), F32)
    hi = min(c_out, g1 * simd)
    full[:, :hi] = v2d[:, :hi]
    return full[:, g0 * simd:].reshape(n_loc, g1 - g0, simd)


def _from_words(v2d: np.ndarray, words: np.ndarray, simd: int, g0: int, g1: int) -> np.ndarray:
    out = v2d.copy()
    c_out = out.shape[1]
    lo, hi = g0 * simd, min(c_out, g1 * simd)
    out[:, lo:hi] = words.reshape(words.shape[0], -1)[:, : hi - lo]
    return out


def _weight_tile(weights: WeightTensor, g0: int, g1: int, pitch: int) -> np.ndarray:
    """Words for groups [g0, g1) with a power-of-two group pitch (zero filled)."""
    rows = weights.k_h * weights.k_w * weights.c_in
    src = weights.words.reshape(rows, weights.groups, weights.simd_width)[:, g0:g1]
    tile = np.zeros((rows, pitch, weights.simd_width), F32)
    tile[:, : g1 - g0] = src
    return tile.reshape(rows * pitch, weights.simd_width)


def _make_spm(regions) -> tuple[Spm, dict]:
    """Allocate ``(name, data, element_size)`` regions, growing past 128 KiB only if needed."""
    need = 0
    for _, data, es in regions:
        need = -(-need // 8) * 8 + len(data) * es
    spm = Spm(max(SPM_CAPACITY, -(-need // 8) * 8 + 8))
    bases = {name: spm.alloc(name, data, es) for name, data, es in regions}
    return spm, bases


def _new_ledgers(n_cores: int, params: CostParams) -> list[CoreLedger]:
    if n_cores < 1:
        raise ValueError("need at least one core")
    return [CoreLedger(c, params.conflict_penalty) for c in range(n_cores)]


_PRECISION_OF_SIMD = {2: "fp32", 4: "fp16", 8: "fp8"}


def _pass_ledger(name, kind, variant, simd, ledgers, spikes) -> CostLedger:
    compute = max(l.busy_cycles for l in ledgers)
    return CostLedger(
        layer=name, kind=kind, variant=variant,
        precision=_PRECISION_OF_SIMD.get(simd, f"simd{simd}"),
        cores=ledgers, passes=[PassTiming(compute, 0)],
        elapsed_cycles=compute, spikes_out=spikes,
    )


def _accumulate(acc, vals, prec):
    acc = acc + vals
    return prec.round(acc) if prec is not None and prec.strict else acc


class _CoreOut:
    """Ofmap proxy used by the step engine: appends cost an AMO, address math and a store."""

    def __init__(self, core: CoreState, builder: OfmapBuilder, base: int, ob: int):
        self.core, self.builder, self.base, self.ob = core, builder, base, ob
        self.channels = builder.channels

    def append(self, location, channel):
        self.core.amo()
        self.core.int_op()
        slot = self.builder.append(location, channel)
        self.core.store(self.base + (location * self.builder.capacity + slot) * self.ob, channel)
        self.core.ledger.unpack_cycles += (
            self.core.params.amo + self.core.params.int_op + self.core.params.store
        )


def _step_act(core, v_word, acc, lif, location, g, out: _CoreOut, v_addr, prec, lanes):
    """Fused activation on the step engine: FP phase, then unpack phase."""
    p = core.params
    core.fp_op(ACT_FP_OPS)
    core.close_phase()
    core.int_op()  # move the compare mask to the integer core
    v_new = act_fun_simd(v_word, acc, lif, location, g, out, prec)
    core.store(v_addr, v_new)
    # per-lane bit test and branch
    core.ledger.debit_int(lanes * (p.int_op + p.branch), instrs=2 * lanes)
    core.ledger.unpack_cycles += lanes * (p.int_op + p.branch)
    core.close_phase()
    return v_new


class _VAudit:
    def __init__(self, n):
        self.reads = np.zeros(n, np.int64)
        self.writes = np.zeros(n, np.int64)

    def read(self, i):
        self.reads[i] += 1
        if self.reads[i] > 1:
            raise DoubleUpdate(f"neuron-state word {i} read twice in one pass")

    def write(self, i):
        self.writes[i] += 1
        if self.writes[i] > 1:
            raise DoubleUpdate(f"neuron-state word {i} written twice in one pass")

    def check(self):
        if not (np.all(self.reads == 1) and np.all(self.writes == 1)):
            raise DoubleUpdate("neuron-state words skipped in pass")


# ---------------------------------------------------------------------------
# convolution

def conv_pass(tile: CompressedSpikeMap, weights: WeightTensor, v: np.ndarray,
              desc: ConvLayerDesc, builder: OfmapBuilder, cores: int = 8, *,
              groups: tuple[int, int] | None = None, engine: str = "batch",
              params: CostParams | None = None, prec: Precision | None = None,
              policy: str = "steal", name: str = "conv"):
    """One weight-group pass over one ifmap tile.

    ``v`` has shape ``(of_h, of_w, c_out)`` for the tile's output rows.
    Spikes are appended to ``builder``; returns ``(v_next, ledger, cursor)``.
    """
    params = params or CostParams()
    _check_conv(tile, weights, v, desc)
    g0, g1 = groups if groups is not None else (0, desc.groups)
    if not 0 <= g0 < g1 <= desc.groups:
        raise GeometryMismatch(f"group range [{g0}, {g1}) outside 0..{desc.groups}")
    simd = desc.simd_width
    n_g = g1 - g0
    pitch = _next_pow2(n_g)
    wb = weights.word_bytes
    shift = (pitch * wb).bit_length() - 1
    ib = tile.index_width // 8
    sb = tile.sptr_width // 8
    n_rf = desc.of_h * desc.of_w
    v2d = v.reshape(n_rf, desc.c_out)
    v_words = _to_words(v2d, simd, g0, g1).reshape(n_rf * n_g, simd)
    ob = builder.index_width // 8
    spm, base = _make_spm([
        ("s_ptr", tile.s_ptr, sb),
        ("c_idcs", tile.c_idcs, ib),
        ("weights", _weight_tile(weights, g0, g1, pitch), wb),
        ("v", v_words, wb),
        ("ofmap", np.zeros(builder.n_locations * builder.capacity, np.int64), ob),
    ])
    ledgers = _new_ledgers(cores, params)
    lanes = _lane_valid(desc.c_out, simd, g0, g1)
    P = desc.k_h * desc.k_w
    before = builder.total
    pos_base = base["weights"] + np.arange(P, dtype=np.int64) * desc.c_in * pitch * wb

    if engine == "step":
        cursor = _conv_step(spm, base, tile, desc, builder, ledgers, params, prec, policy,
                            n_g, g0, pitch, shift, ib, sb, ob, lanes, pos_base)
    elif engine == "batch":
        cursor = _conv_batch(spm, base, tile, desc, builder, ledgers, params, prec, policy,
                             n_g, g0, pitch, shift, ib, lanes, pos_base)
    else:
        raise ValueError(f"engine must be one of {ENGINES}")
    v_next = _from_words(v2d, spm.region("v").data.reshape(n_rf, n_g, simd), simd, g0, g1)
    spikes = builder.total - before
    return v_next.reshape(v.shape), _pass_ledger(name, "conv", desc.variant, simd, ledgers, spikes), cursor


def _check_conv(tile, weights, v, desc):
    if (tile.height, tile.width, tile.channels) != (desc.if_h, desc.if_w, desc.c_in):
        raise GeometryMismatch(
            f"ifmap {tile.height}x{tile.width}x{tile.channels} != desc "
            f"{desc.if_h}x{desc.if_w}x{desc.c_in}"
        )
    if (weights.k_h, weights.k_w, weights.c_in, weights.c_out, weights.simd_width) != (
            desc.k_h, desc.k_w, desc.c_in, desc.c_out, desc.simd_width):
        raise GeometryMismatch("weight tensor does not match layer descriptor")
    if v.shape != (desc.of_h, desc.of_w, desc.c_out):
        raise GeometryMismatch(f"v shape {v.shape} != {(desc.of_h, desc.of_w, desc.c_out)}")


def _rf_coords(desc: ConvLayerDesc):
    """coo[rf, pos]: input location feeding kernel position ``pos`` of RF ``rf``."""
    oy, ox = np.divmod(np.arange(desc.of_h * desc.of_w), desc.of_w)
    ky, kx = np.divmod(np.arange(desc.k_h * desc.k_w), desc.k_w)
    return (oy[:, None] * desc.stride + ky[None, :]) * desc.if_w + ox[:, None] * desc.stride + kx[None, :]


def _conv_step(spm, base, tile, desc, builder, ledgers, params, prec, policy,
               n_g, g0, pitch, shift, ib, sb, ob, lanes, pos_base):
    wb = 8
    audit = _VAudit(desc.of_h * desc.of_w * n_g)
    cores = [CoreState(c, spm, params, ledgers[c]) for c in range(len(ledgers))]
    spva = spva_baseline if desc.variant == "baseline" else spva_streamed

    def run_item(c, rf):
        core = cores[c]
        out = _CoreOut(core, builder, base["ofmap"], ob)
        core.amo()          # fetch-and-add on the RF cursor
        core.int_op(2)      # rf -> (oy, ox)
        core.branch()
        core.close_phase()
        oy, ox = divmod(rf, desc.of_w)
        for gl in range(n_g):
            core.int_op()   # w_baddr
            v_addr = base["v"] + (rf * n_g + gl) * wb
            audit.read(rf * n_g + gl)
            v_word = core.load(v_addr)
            core.fp_op()    # ic = 0
            acc = np.zeros(desc.simd_width, F32)
            core.close_phase()
            for ky in range(desc.k_h):
                for kx in range(desc.k_w):
                    pos = ky * desc.k_w + kx
                    core.branch()
                    core.int_op(3)
                    coo = (oy * desc.stride + ky) * desc.if_w + ox * desc.stride + kx
                    s_base = int(core.load(base["s_ptr"] + coo * sb))
                    s_end = int(core.load(base["s_ptr"] + (coo + 1) * sb))
                    core.int_op()
                    acc = spva(core, base["c_idcs"] + s_base * ib, s_end - s_base,
                               int(pos_base[pos]) + gl * wb, acc,
                               index_width=ib * 8, element_shift=shift, prec=prec)
                    core.close_phase()
            _step_act(core, v_word, acc, desc.lif, rf, g0 + gl, out, v_addr, prec,
                      int(lanes[gl].sum()))
            audit.write(rf * n_g + gl)

    cursor = run_schedule(desc.of_h * desc.of_w, ledgers, run_item, policy)
    audit.check()
    return cursor


def _conv_batch(spm, base, tile, desc, builder, ledgers, params, prec, policy,
                n_g, g0, pitch, shift, ib, lanes, pos_base):
    wb = 8
    n_rf = desc.of_h * desc.of_w
    P = desc.k_h * desc.k_w
    coo = _rf_coords(desc)
    s_ptr = tile.s_ptr.astype(np.int64)
    lens = s_ptr[coo + 1] - s_ptr[coo]                       # (n_rf, P)
    idx_bases = base["c_idcs"] + s_ptr[coo] * ib
    val_bases = np.broadcast_to(pos_base[None, :], (n_rf, P))

    if desc.variant == "streamed":
        addrs = indirect_gather_addresses(spm, val_bases.ravel(), idx_bases.ravel(),
                                          lens.ravel(), ib * 8, shift)
    else:
        flat_lens = lens.ravel()
        sid = np.repeat(np.arange(flat_lens.size), flat_lens)
        offs = np.arange(sid.size) - (np.cumsum(flat_lens) - flat_lens)[sid]
        idx = spm.gather(idx_bases.ravel()[sid] + offs * ib).astype(np.int64)
        addrs = val_bases.ravel()[sid] + idx * (pitch * wb)

    # lay each RF's concatenated streams out as one padded row
    totals = lens.sum(axis=1)
    width = int(totals.max()) if n_rf else 0
    rf_of = np.repeat(np.arange(n_rf), totals)
    col = np.arange(rf_of.size) - (np.cumsum(totals) - totals)[rf_of]
    amat = np.full((n_rf, width), base["weights"], np.int64)
    valid = np.zeros((n_rf, width), bool)
    amat[rf_of, col] = addrs
    valid[rf_of, col] = True
    goff = np.arange(n_g, dtype=np.int64) * wb
    acc = np.zeros((n_rf, n_g, desc.simd_width), F32)
    for j in range(width):
        words = spm.gather(amat[:, j, None] + goff[None, :])  # (n_rf, n_g, simd)
        words = np.where(valid[:, j, None, None], words, F32(0))
        acc = _accumulate(acc, words, prec)

    v_region = spm.region("v")
    v_words = v_region.data.reshape(n_rf, n_g, desc.simd_width)
    v_next, spike = lif_update(v_words, acc, desc.lif, prec)
    spike &= lanes[None]
    v_next = np.where(lanes[None], v_next, v_words)
    v_region.data[:] = v_next.reshape(-1, desc.simd_width)

    costs = _Costs(params, (n_rf, n_g))
    ctl = _conv_ctl(params)
    _group_setup_phase(costs)
    for pos in range(P):
        _spva_phase(costs, lens[:, pos, None], desc.variant, *ctl)
    _act_phases(costs, lanes.sum(axis=1)[None, :], spike.sum(axis=2))
    per_rf = costs.reduce(axes=1)
    claim = _Costs(params, (n_rf,))
    _claim_phase(claim)

    chans = (np.arange(g0, g0 + n_g)[:, None] * desc.simd_width + np.arange(desc.simd_width)).ravel()
    flat_spike = spike.reshape(n_rf, -1)

    def run_item(c, rf):
        claim.debit(ledgers[c], rf)
        per_rf.debit(ledgers[c], rf)
        hit = chans[flat_spike[rf]]
        builder.extend(np.full(hit.size, rf), hit)

    return run_schedule(n_rf, ledgers, run_item, policy)


def conv_layer(tile: CompressedSpikeMap, weights: WeightTensor, v, desc: ConvLayerDesc,
               cores: int = 8, **kw):
    """Untiled convolution: all groups in one pass, ofmap joined to canonical form.

    Returns ``(ofmap, v_next, ledger)``.
    """
    v = np.asarray(v, F32)
    b = OfmapBuilder(desc.of_h, desc.of_w, desc.c_out,
                     index_width=ofmap_index_width(desc.c_out, kw.pop("index_width", 16)))
    v_next, ledger, _ = conv_pass(tile, weights, v, desc, b, cores, **kw)
    return join_sptr(b), v_next, ledger


# ---------------------------------------------------------------------------
# fully connected

def fc_pass(inp: FcSpikeList, weights: WeightTensor, v: np.ndarray, lif: LifParams,
            variant: str, builder: OfmapBuilder, cores: int = 8, *,
            groups: tuple[int, int] | None = None, engine: str = "batch",
            params: CostParams | None = None, prec: Precision | None = None,
            policy: str = "steal", name: str = "fc"):
    _check_variant(variant)
    params = params or CostParams()
    if weights.k_h * weights.k_w != 1 or weights.c_in != inp.size:
        raise GeometryMismatch(f"FC weights {weights.c_in}->{weights.c_out} do not take {inp.size} inputs")
    if v.shape != (weights.c_out,):
        raise GeometryMismatch(f"v shape {v.shape} != ({weights.c_out},)")
    simd = weights.simd_width
    g0, g1 = groups if groups is not None else (0, weights.groups)
    if not 0 <= g0 < g1 <= weights.groups:
        raise GeometryMismatch(f"group range [{g0}, {g1}) outside 0..{weights.groups}")
    n_g = g1 - g0
    pitch = _next_pow2(n_g)
    wb = weights.word_bytes
    shift = (pitch * wb).bit_length() - 1
    ib = inp.index_width // 8
    ob = builder.index_width // 8
    v_words = _to_words(v[None, :], simd, g0, g1).reshape(n_g, simd)
    spm, base = _make_spm([
        ("count", np.array([inp.count], np.int64), 4),
        ("c_idcs", inp.c_idcs, ib),
        ("weights", _weight_tile(weights, g0, g1, pitch), wb),
        ("v", v_words, wb),
        ("ofmap", np.zeros(builder.capacity, np.int64), ob),
    ])
    ledgers = _new_ledgers(cores, params)
    lanes = _lane_valid(weights.c_out, simd, g0, g1)
    lif_p = lif
    before = builder.total

    if engine == "step":
        cores_ = [CoreState(c, spm, params, ledgers[c]) for c in range(cores)]
        spva = spva_baseline if variant == "baseline" else spva_streamed
        audit = _VAudit(n_g)

        def run_item(c, gl):
            core = cores_[c]
            out = _CoreOut(core, builder, base["ofmap"], ob)
            core.amo()
            core.int_op(2)
            core.branch()
            core.close_phase()
            core.int_op()
            v_addr = base["v"] + gl * wb
            audit.read(gl)
            v_word = core.load(v_addr)
            core.fp_op()
            acc = np.zeros(simd, F32)
            core.close_phase()
            n = int(core.load(base["count"]))
            core.branch()
            acc = spva(core, base["c_idcs"], n, base["weights"] + gl * wb, acc,
                       index_width=ib * 8, element_shift=shift, prec=prec)
            core.close_phase()
            _step_act(core, v_word, acc, lif_p, 0, g0 + gl, out, v_addr, prec, int(lanes[gl].sum()))
            audit.write(gl)

        cursor = run_schedule(n_g, ledgers, run_item, policy)
        audit.check()
    elif engine == "batch":
        idx = spm.gather(base["c_idcs"] + np.arange(inp.count, dtype=np.int64) * ib).astype(np.int64)
        if variant == "streamed":
            addrs = indirect_gather_addresses(spm, [base["weights"]], [base["c_idcs"]],
                                              [inp.count], ib * 8, shift)
        else:
            addrs = base["weights"] + idx * (pitch * wb)
        goff = np.arange(n_g, dtype=np.int64) * wb
        acc = np.zeros((n_g, simd), F32)
        for a in addrs:
            acc = _accumulate(acc, spm.gather(a + goff), prec)
        v_region = spm.region("v")
        v_next, spike = lif_update(v_region.data, acc, lif_p, prec)
        spike &= lanes
        v_region.data[:] = np.where(lanes, v_next, v_region.data)

        costs = _Costs(params, (n_g,))
        _claim_phase(costs)
        _group_setup_phase(costs)
        _spva_phase(costs, np.full(n_g, inp.count), variant, *_fc_ctl(params))
        _act_phases(costs, lanes.sum(axis=1), spike.sum(axis=1))

        def run_item(c, gl):
            costs.debit(ledgers[c], gl)
            hit = (g0 + gl) * simd + np.flatnonzero(spike[gl])
            builder.extend(np.zeros(hit.size, np.int64), hit)

        cursor = run_schedule(n_g, ledgers, run_item, policy)
    else:
        raise ValueError(f"engine must be one of {ENGINES}")
    v_out = _from_words(v[None, :], spm.region("v").data.reshape(1, n_g, simd), simd, g0, g1)[0]
    return v_out, _pass_ledger(name, "fc", variant, simd, ledgers, builder.total - before), cursor


def fc_layer(inp: FcSpikeList, weights: WeightTensor, v, lif: LifParams, variant: str,
             cores: int = 8, **kw):
    """Returns ``(FcSpikeList, v_next, ledger)``."""
    v = np.asarray(v, F32)
    iw = ofmap_index_width(weights.c_out, kw.pop("index_width", 16))
    b = OfmapBuilder(1, 1, weights.c_out, index_width=iw)
    v_next, ledger, _ = fc_pass(inp, weights, v, lif, variant, b, cores, **kw)
    return builder_to_fc(b), v_next, ledger


def builder_to_fc(builder: OfmapBuilder) -> FcSpikeList:
    m = join_sptr(builder)
    return FcSpikeList(builder.channels, m.c_idcs.astype(np.int64), builder.index_width)


# ---------------------------------------------------------------------------
# spike encoding (dense first layer)

def im2row(inp: DenseTensor, k_h: int, k_w: int, stride: int = 1) -> np.ndarray:
    """Rows are flattened HWC receptive fields, one per output location."""
    x = inp.values if isinstance(inp, DenseTensor) else np.asarray(inp, F32)
    H, W, C = x.shape
    if k_h > H or k_w > W or (H - k_h) % stride or (W - k_w) % stride:
        raise GeometryMismatch(f"{k_h}x{k_w}/s{stride} kernel does not tile {H}x{W}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k_h, k_w), axis=(0, 1))
    win = win[::stride, ::stride]                   # (of_h, of_w, C, k_h, k_w)
    of_h, of_w = win.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(of_h * of_w, k_h * k_w * C)


@dataclass(frozen=True)
class EncodeLayerDesc:
    if_h: int
    if_w: int
    c_in: int
    c_out: int
    k_h: int = 3
    k_w: int = 3
    stride: int = 1
    lif: LifParams = field(default_factory=LifParams)
    simd_width: int = 4
    variant: str = "streamed"

    def __post_init__(self):
        ConvLayerDesc(self.if_h, self.if_w, self.c_in, self.c_out, self.k_h, self.k_w,
                      self.stride, self.lif, self.simd_width, self.variant)

    of_h = ConvLayerDesc.of_h
    of_w = ConvLayerDesc.of_w
    groups = ConvLayerDesc.groups

    @property
    def K(self) -> int:
        return self.k_h * self.k_w * self.c_in


def encode_pass(rows: np.ndarray, weights: WeightTensor, v: np.ndarray, desc: EncodeLayerDesc,
                builder: OfmapBuilder, cores: int = 8, *, groups=None, engine: str = "batch",
                params: CostParams | None = None, prec: Precision | None = None,
                policy: str = "steal", name: str = "encode"):
    """Matmul of im2row ``rows`` (n_rows, K) against the filters.

    Work items are (group, row) dot products claimed group-major; the
    streamed variant feeds both operands from affine streams.
    """
    params = params or CostParams()
    n_rows, K = rows.shape
    if K != desc.K or weights.c_out != desc.c_out or weights.simd_width != desc.simd_width:
        raise GeometryMismatch("encode weights or im2row rows do not match descriptor")
    if v.shape != (n_rows, desc.c_out):
        raise GeometryMismatch(f"v shape {v.shape} != {(n_rows, desc.c_out)}")
    simd = desc.simd_width
    g0, g1 = groups if groups is not None else (0, desc.groups)
    n_g = g1 - g0
    eb = prec.elem_bytes if prec else 4
    wb = weights.word_bytes
    w_words = weights.words.reshape(K, weights.groups, simd)[:, g0:g1].reshape(K * n_g, simd)
    v_words = _to_words(v, simd, g0, g1).reshape(n_rows * n_g, simd)
    ob = builder.index_width // 8
    spm, base = _make_spm([
        ("x", np.asarray(rows, F32).ravel(), eb),
        ("weights", w_words, wb),
        ("v", v_words, wb),
        ("ofmap", np.zeros(builder.n_locations * builder.capacity, np.int64), ob),
    ])
    ledgers = _new_ledgers(cores, params)
    lanes = _lane_valid(desc.c_out, simd, g0, g1)
    n_items = n_rows * n_g
    before = builder.total

    if engine == "step":
        cores_ = [CoreState(c, spm, params, ledgers[c]) for c in range(cores)]
        audit = _VAudit(n_items)

        def run_item(c, item):
            gl, r = divmod(item, n_rows)
            core = cores_[c]
            out = _CoreOut(core, builder, base["ofmap"], ob)
            core.amo()
            core.int_op(2)
            core.branch()
            core.close_phase()
            core.int_op()
            v_addr = base["v"] + (r * n_g + gl) * wb
            audit.read(r * n_g + gl)
            v_word = core.load(v_addr)
            core.fp_op()
            acc = np.zeros(simd, F32)
            core.close_phase()
            core.int_op(2)  # row and column base addresses
            x0 = base["x"] + r * K * eb
            w0 = base["weights"] + gl * wb
            if desc.variant == "baseline":
                for k in range(K):
                    x = core.load(x0 + k * eb)
                    w = core.load(w0 + k * n_g * wb)
                    core.int_op(2)
                    core.fp_op(useful=True, kind="fmadd")
                    acc = _accumulate(acc, F32(x) * w, prec)
                    core.branch()
            else:
                sr_configure(core, 0, AffineStreamDesc(x0, ((eb, K),), eb))
                sr_configure(core, 1, AffineStreamDesc(w0, ((n_g * wb, K),), wb))
                box = [acc]

                def body():
                    box[0] = _accumulate(box[0], F32(sr_read(core, 0)) * sr_read(core, 1), prec)

                frep(core, 1, K, body, kind="fmadd")
                acc = box[0]
            core.close_phase()
            _step_act(core, v_word, acc, desc.lif, r, g0 + gl, out, v_addr, prec, int(lanes[gl].sum()))
            audit.write(r * n_g + gl)

        cursor = run_schedule(n_items, ledgers, run_item, policy)
        audit.check()
    elif engine == "batch":
        xs = spm.region("x").data.reshape(n_rows, K)
        # two affine streams: row-major x, weight column with stride n_g words
        w_addr = AffineStreamDesc(base["weights"], ((n_g * wb, K), (wb, n_g)), wb).addresses()
        wmat = spm.gather(w_addr).reshape(n_g, K, simd)
        acc = np.zeros((n_rows, n_g, simd), F32)
        for k in range(K):
            acc = _accumulate(acc, xs[:, k, None, None] * wmat[None, :, k, :], prec)
        v_region = spm.region("v")
        vw = v_region.data.reshape(n_rows, n_g, simd)
        v_next, spike = lif_update(vw, acc, desc.lif, prec)
        spike &= lanes[None]
        v_region.data[:] = np.where(lanes[None], v_next, vw).reshape(-1, simd)

        costs = _Costs(params, (n_g, n_rows))
        _claim_phase(costs)
        _group_setup_phase(costs)
        p = params
        if desc.variant == "baseline":
            per = 2 * p.load + 2 * p.int_op + p.branch
            costs.phase(int_c=2 * p.int_op + K * per, fp_c=K * p.fmadd, useful=K * p.fmadd,
                        instrs=2 + 6 * K, mem_int=2 * K)
        else:
            setup = 2 * 3 * p.sr_set
            costs.phase(int_c=2 * p.int_op + setup + p.frep, fp_c=K * p.fmadd, useful=K * p.fmadd,
                        instrs=2 + 6 + 1 + K, mem_fp=2 * K, setup=setup)
        _act_phases(costs, lanes.sum(axis=1)[:, None], spike.sum(axis=2).T)
        flat_costs = costs.reduce(axes=None)
        chans_of = [(g0 + gl) * simd + np.arange(simd) for gl in range(n_g)]

        def run_item(c, item):
            gl, r = divmod(item, n_rows)
            flat_costs.debit(ledgers[c], (gl, r))
            hit = chans_of[gl][spike[r, gl]]
            builder.extend(np.full(hit.size, r), hit)

        cursor = run_schedule(n_items, ledgers, run_item, policy)
    else:
        raise ValueError(f"engine must be one of {ENGINES}")
    v_out = _from_words(v, spm.region("v").data.reshape(n_rows, n_g, simd), simd, g0, g1)
    return v_out, _pass_ledger(name, "encode", desc.variant, simd, ledgers, builder.total - before), cursor


def encode_layer(inp: DenseTensor, weights: WeightTensor, v, lif: LifParams, variant: str,
                 cores: int = 8, *, stride: int = 1, **kw):
    """Dense first layer: currents are image values times filters, then LIF.

    ``v`` has shape ``(of_h, of_w, c_out)``. Returns ``(ofmap, v_next, ledger)``.
    """
    H, W, C = inp.shape
    desc = EncodeLayerDesc(H, W, C, weights.c_out, weights.k_h, weights.k_w, stride, lif,
                           weights.simd_width, variant)
    if weights.c_in != C:
        raise GeometryMismatch(f"weights expect {weights.c_in} input channels, image has {C}")
    v = np.asarray(v, F32)
    if v.shape != (desc.of_h, desc.of_w, desc.c_out):
        raise GeometryMismatch(f"v shape {v.shape} != {(desc.of_h, desc.of_w, desc.c_out)}")
    rows = im2row(inp, desc.k_h, desc.k_w, stride)
    b = OfmapBuilder(desc.of_h, desc.of_w, desc.c_out,
                     index_width=ofmap_index_width(desc.c_out, kw.pop("index_width", 16)))
    v_next, ledger, _ = encode_pass(rows, weights, v.reshape(-1, desc.c_out), desc, b, cores, **kw)
    return join_sptr(b), v_next.reshape(v.shape), ledger


def conv_sptr_width(desc: ConvLayerDesc, index_width: int) -> int:
    return sptr_width_for(desc.if_h, desc.if_w, desc.c_in, index_width)
