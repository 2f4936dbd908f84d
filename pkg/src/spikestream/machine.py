"""Abstract worker-core model: scratchpad, stream registers and FREP.

Each worker owns three stream registers (SRs). All three generate affine
address patterns of up to four dimensions; slots 0 and 1 can also run 1-D
indirect streams that gather ``value_base + (index[i] << element_shift)``.
Streams feed FP operands directly, so address generation costs no integer
instructions. Every instruction issued through :class:`CoreState` debits
the core's :class:`~spikestream.perf.CoreLedger`.

The SPM is a byte-addressed space of typed regions. Addresses are modeled
bytes; a region stores host values (e.g. a float32 SIMD word per 8-byte
modeled element), which keeps arithmetic exact while addresses stay
faithful to the target.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfSpm, SlotCapability, SpmWriteConflict, StreamExhausted
from .perf import CoreLedger, CostParams

SPM_CAPACITY = 128 * 1024
SPM_BANKS = 32
N_SLOTS = 3
INDIRECT_SLOTS = (0, 1)


@dataclass
class Region:
    name: str
    base: int
    element_size: int
    data: np.ndarray

    @property
    def end(self) -> int:
        return self.base + self.data.shape[0] * self.element_size


class Spm:
    """Shared scratchpad. Bank count is recorded, conflicts are not modeled."""

    def __init__(self, capacity: int = SPM_CAPACITY, bank_count: int = SPM_BANKS):
        self.capacity = capacity
        self.bank_count = bank_count
        self._regions: list[Region] = []
        self._bases: list[int] = []
        self._top = 0
        self._writers: dict[int, int] = {}

    @property
    def used(self) -> int:
        return self._top

    def alloc(self, name: str, data, element_size: int, align: int = 8) -> int:
        data = np.array(data, copy=True)
        base = -(-self._top // align) * align
        end = base + data.shape[0] * element_size
        if end > self.capacity:
            raise OutOfSpm(f"allocating {name!r} ({end - base} B) overflows SPM at {end} > {self.capacity}")
        region = Region(name, base, element_size, data)
        self._regions.append(region)
        self._bases.append(base)
        self._top = end
        return base

    def region(self, name: str) -> Region:
        for r in self._regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def _locate(self, addr: int) -> tuple[Region, int]:
        if not 0 <= addr < self.capacity:
            raise OutOfSpm(f"address {addr:#x} outside SPM of {self.capacity} bytes")
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0 or addr >= self._regions[i].end:
            raise OutOfSpm(f"address {addr:#x} is not mapped")
        r = self._regions[i]
        off = addr - r.base
        if off % r.element_size:
            raise OutOfSpm(f"misaligned access {addr:#x} into {r.name!r}")
        return r, off // r.element_size

    def load(self, addr: int):
        r, i = self._locate(int(addr))
        return r.data[i].copy() if r.data.ndim > 1 else r.data[i]

    def store(self, addr: int, value, core: int | None = None) -> None:
        addr = int(addr)
        r, i = self._locate(addr)
        if core is not None:
            prev = self._writers.setdefault(addr, core)
            if prev != core:
                raise SpmWriteConflict(f"cores {prev} and {core} both wrote {addr:#x}")
        r.data[i] = value

    def gather(self, addrs) -> np.ndarray:
        """Vector load; every address must fall in one region."""
        addrs = np.asarray(addrs, dtype=np.int64)
        if addrs.size == 0:
            return np.zeros(addrs.shape, np.int64)
        lo, hi = int(addrs.min()), int(addrs.max())
        r, _ = self._locate(lo)
        if hi >= r.end or hi >= self.capacity:
            raise OutOfSpm(f"vector access {lo:#x}..{hi:#x} leaves region {r.name!r}")
        off = addrs - r.base
        if np.any(off % r.element_size):
            raise OutOfSpm(f"misaligned vector access into {r.name!r}")
        return r.data[off // r.element_size]

    def barrier(self) -> None:
        """Forget write ownership; cores may write any address again."""
        self._writers.clear()


# ---------------------------------------------------------------------------
# stream descriptors

@dataclass(frozen=True)
class AffineStreamDesc:
    """Nested-loop stream. ``dims`` lists (stride_bytes, bound), innermost first."""

    base: int
    dims: tuple
    element_size: int = 8
    direction: str = "read"

    def __post_init__(self):
        if not 1 <= len(self.dims) <= 4:
            raise ValueError(f"affine streams have 1..4 dimensions, got {len(self.dims)}")
        if any(b < 0 for _, b in self.dims):
            raise ValueError("negative bound")
        if self.direction not in ("read", "write"):
            raise ValueError(f"direction must be read or write, got {self.direction!r}")

    @property
    def setup_fields(self) -> int:
        # base pointer plus (stride, bound) per dimension
        return 1 + 2 * len(self.dims)

    @property
    def bound(self) -> int:
        n = 1
        for _, b in self.dims:
            n *= b
        return n

    def addresses(self) -> np.ndarray:
        addr = np.array([self.base], dtype=np.int64)
        # build outermost-first so the innermost dimension varies fastest
        for stride, bound in reversed(self.dims):
            addr = (addr[:, None] + np.arange(bound, dtype=np.int64)[None, :] * stride).ravel()
        return addr


@dataclass(frozen=True)
class IndirectStreamDesc:
    value_base: int
    index_base: int
    index_width: int
    bound: int
    element_shift: int = 3
    direction: str = "read"

    def __post_init__(self):
        if self.index_width not in (8, 16, 32):
            raise ValueError(f"indirect index width must be 8, 16 or 32, got {self.index_width}")
        if self.bound < 0:
            raise ValueError("negative bound")

    setup_fields = 3  # sr_set_indir, sr_set_idcs, sr_set_bound

    def addresses(self, spm: Spm) -> np.ndarray:
        ib = self.index_width // 8
        if self.bound == 0:
            return np.zeros(0, np.int64)
        idx = spm.gather(self.index_base + np.arange(self.bound, dtype=np.int64) * ib)
        return self.value_base + (idx.astype(np.int64) << self.element_shift)


def indirect_gather_addresses(spm: Spm, value_bases, index_bases, bounds,
                              index_width: int, element_shift: int) -> np.ndarray:
    """Addresses of many indirect streams, concatenated in stream order."""
    bounds = np.asarray(bounds, dtype=np.int64)
    total = int(bounds.sum())
    if total == 0:
        return np.zeros(0, np.int64)
    sid = np.repeat(np.arange(bounds.shape[0]), bounds)
    starts = np.cumsum(bounds) - bounds
    offs = np.arange(total, dtype=np.int64) - starts[sid]
    idx = spm.gather(np.asarray(index_bases, np.int64)[sid] + offs * (index_width // 8))
    return np.asarray(value_bases, np.int64)[sid] + (idx.astype(np.int64) << element_shift)


# ---------------------------------------------------------------------------
# core

@dataclass
class _Slot:
    indirect_capable: bool
    active: object = None
    shadow: object = None
    pos: int = 0
    addrs: np.ndarray | None = field(default=None, repr=False)


class CoreState:
    """One worker core: its three SRs, its pipes and its ledger."""

    def __init__(self, core_id: int = 0, spm: Spm | None = None,
                 params: CostParams | None = None, ledger: CoreLedger | None = None):
        self.id = core_id
        self.spm = spm if spm is not None else Spm()
        self.params = params or CostParams()
        self.ledger = ledger or CoreLedger(core_id, self.params.conflict_penalty)
        self.slots = [_Slot(i in INDIRECT_SLOTS) for i in range(N_SLOTS)]
        self.frep_state: tuple[int, int] | None = None

    # integer pipe
    def int_op(self, n: int = 1) -> None:
        self.ledger.debit_int(self.params.int_op * n, n)

    def branch(self) -> None:
        self.ledger.debit_int(self.params.branch)

    def amo(self) -> None:
        self.ledger.debit_int(self.params.amo, mem=1)

    def load(self, addr):
        self.ledger.debit_int(self.params.load, mem=1)
        return self.spm.load(addr)

    def store(self, addr, value) -> None:
        self.ledger.debit_int(self.params.store, mem=1)
        self.spm.store(addr, value, core=self.id)

    # FP pipe
    def fp_op(self, n: int = 1, useful: bool = False, kind: str = "fp_op") -> None:
        cycles = getattr(self.params, kind) * n
        self.ledger.debit_fp(cycles, useful=cycles if useful else 0, instrs=n)

    def close_phase(self) -> int:
        return self.ledger.close_phase()

    def indirect_count(self) -> int:
        return sum(isinstance(s.active, IndirectStreamDesc) for s in self.slots)


def _check_range(spm: Spm, desc) -> None:
    if isinstance(desc, AffineStreamDesc):
        if desc.bound == 0:
            return
        a = desc.addresses()
        lo, hi = int(a.min()), int(a.max()) + desc.element_size
    else:
        if desc.bound == 0:
            return
        lo = desc.index_base
        hi = desc.index_base + desc.bound * desc.index_width // 8
    if lo < 0 or hi > spm.capacity:
        raise OutOfSpm(f"stream range {lo:#x}..{hi:#x} outside SPM")


def sr_configure(core: CoreState, slot: int, desc, shadow: bool = False) -> None:
    """Program a stream register, either live or into its shadow copy."""
    if not 0 <= slot < N_SLOTS:
        raise SlotCapability(f"no SR slot {slot}")
    s = core.slots[slot]
    if isinstance(desc, IndirectStreamDesc) and not s.indirect_capable:
        raise SlotCapability(f"SR slot {slot} only supports affine streams")
    if not isinstance(desc, (AffineStreamDesc, IndirectStreamDesc)):
        raise TypeError(f"not a stream descriptor: {desc!r}")
    _check_range(core.spm, desc)
    cycles = core.params.sr_set * desc.setup_fields
    core.ledger.debit_int(cycles, instrs=desc.setup_fields)
    core.ledger.stream_setup_cycles += cycles
    if shadow:
        s.shadow = desc
    else:
        _activate(s, desc)


def _activate(s: _Slot, desc) -> None:
    s.active = desc
    s.pos = 0
    s.addrs = desc.addresses() if isinstance(desc, AffineStreamDesc) else None


def sr_commit(core: CoreState, slot: int) -> None:
    """Swap the staged shadow descriptor in. Reads never see a mix of both."""
    s = core.slots[slot]
    if s.shadow is None:
        raise StreamExhausted(f"SR slot {slot} has no staged descriptor")
    _activate(s, s.shadow)
    s.shadow = None


def _next_address(core: CoreState, slot: int) -> int:
    s = core.slots[slot]
    d = s.active
    if d is None or s.pos >= d.bound:
        raise StreamExhausted(f"SR slot {slot} exhausted")
    if isinstance(d, AffineStreamDesc):
        addr = int(s.addrs[s.pos])
    else:
        idx = core.spm.load(d.index_base + s.pos * (d.index_width // 8))
        addr = d.value_base + (int(idx) << d.element_shift)
    s.pos += 1
    # the SPM access is made by the stream unit on behalf of the FP pipe
    core.ledger.debit_fp(0, instrs=0, mem=1)
    return addr


def sr_read(core: CoreState, slot: int):
    d = core.slots[slot].active
    if d is not None and d.direction != "read":
        raise SlotCapability(f"SR slot {slot} is a write stream")
    return core.spm.load(_next_address(core, slot))


def sr_write(core: CoreState, slot: int, value) -> None:
    d = core.slots[slot].active
    if d is not None and d.direction != "write":
        raise SlotCapability(f"SR slot {slot} is a read stream")
    core.spm.store(_next_address(core, slot), value, core=core.id)


def frep(core: CoreState, body_fp_ops: int, repeats: int, fn, useful: bool = True,
         kind: str = "fadd") -> None:
    """Hardware loop: run ``fn`` ``repeats`` times on the FP pipe.

    Only the ``frep`` issue touches the integer pipe; the repeated body is
    charged to the FP pipe.
    """
    if repeats < 1:
        raise ValueError("frep needs repeats >= 1")
    core.ledger.debit_int(core.params.frep)
    core.frep_state = (body_fp_ops, repeats)
    for _ in range(repeats):
        fn()
    n = body_fp_ops * repeats
    cycles = getattr(core.params, kind) * n
    core.ledger.debit_fp(cycles, useful=cycles if useful else 0, instrs=n)
    core.frep_state = None
