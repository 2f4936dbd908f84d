"""Cycle ledgers and the metrics derived from them.

The integer core and the FPU are decoupled, so work is accounted per
*phase*: inside one phase the two pipes overlap fully and the phase costs
``max(int, fp)`` cycles. Phases execute back to back on a core; a layer
ends at a barrier, so its compute time is the slowest core.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError, MetricsError
from .formats import footprint_aer, footprint_csr

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CostParams:
    """Cycles per instruction class.

    Defaults assume a single-cycle SPM interconnect. ``conflict_penalty``
    scales every SPM access to approximate bank conflicts (1.0 = none).
    """

    int_op: int = 1
    load: int = 1
    store: int = 1
    branch: int = 1
    amo: int = 2
    fadd: int = 1
    fmadd: int = 1
    fp_op: int = 1
    sr_set: int = 1
    frep: int = 1
    conflict_penalty: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"cost.{f.name}", "must be >= 0")
        if self.conflict_penalty < 1.0:
            raise ConfigError("cost.conflict_penalty", "must be >= 1.0")

    @classmethod
    def from_mapping(cls, data: dict) -> "CostParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"cost.{sorted(unknown)[0]}", "unknown cost parameter")
        return cls(**data)

    def with_overrides(self, data: dict) -> "CostParams":
        merged = dataclasses.asdict(self)
        merged.update(data)
        return CostParams.from_mapping(merged)


def load_cost_overrides(path=None) -> dict:
    """Read a JSON cost-override file, defaulting to ``$SPIKESTREAM_COST_PARAMS``."""
    path = path or os.environ.get("SPIKESTREAM_COST_PARAMS")
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("SPIKESTREAM_COST_PARAMS", str(exc)) from exc
    if not isinstance(data, dict):
        raise ConfigError("SPIKESTREAM_COST_PARAMS", "expected a JSON object")
    return data


@dataclass
class CoreLedger:
    """Counters for one worker core.

    Debits land in an open phase; :meth:`close_phase` folds the phase into
    the totals and advances ``busy_cycles`` by the overlapped cost.
    """

    core: int = 0
    conflict_penalty: float = 1.0
    int_cycles: int = 0
    fp_useful_cycles: int = 0
    fp_total_cycles: int = 0
    instructions_retired: int = 0
    stream_setup_cycles: int = 0
    unpack_cycles: int = 0
    busy_cycles: int = 0
    items: int = 0
    _int: int = field(default=0, repr=False)
    _fp: int = field(default=0, repr=False)
    _mem_int: int = field(default=0, repr=False)
    _mem_fp: int = field(default=0, repr=False)

    def debit_int(self, cycles: int, instrs: int = 1, mem: int = 0) -> None:
        self._int += cycles
        self._mem_int += mem
        self.instructions_retired += instrs

    def debit_fp(self, cycles: int, useful: int = 0, instrs: int = 1, mem: int = 0) -> None:
        self._fp += cycles
        self._mem_fp += mem
        self.fp_useful_cycles += useful
        self.instructions_retired += instrs

    @property
    def phase_open(self) -> bool:
        return bool(self._int or self._fp)

    def close_phase(self) -> int:
        extra = self.conflict_penalty - 1.0
        int_c = self._int + math.ceil(self._mem_int * extra)
        fp_c = self._fp + math.ceil(self._mem_fp * extra)
        cost = max(int_c, fp_c)
        self.int_cycles += int_c
        self.fp_total_cycles += fp_c
        self.busy_cycles += cost
        self._int = self._fp = self._mem_int = self._mem_fp = 0
        return cost

    def merge(self, other: "CoreLedger") -> None:
        if other.phase_open or self.phase_open:
            raise MetricsError("cannot merge ledgers with an open phase")
        for name in ("int_cycles", "fp_useful_cycles", "fp_total_cycles", "instructions_retired",
                     "stream_setup_cycles", "unpack_cycles", "busy_cycles", "items"):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def counters(self) -> dict:
        return {
            "int_cycles": self.int_cycles,
            "fp_useful_cycles": self.fp_useful_cycles,
            "fp_total_cycles": self.fp_total_cycles,
            "instructions_retired": self.instructions_retired,
            "stream_setup_cycles": self.stream_setup_cycles,
            "unpack_cycles": self.unpack_cycles,
            "busy_cycles": self.busy_cycles,
            "items": self.items,
        }


@dataclass(frozen=True)
class PassTiming:
    compute: int
    dma: int  # DMA window issued while this pass computes


@dataclass
class CostLedger:
    """All counters for one layer execution (one timestep)."""

    layer: str
    kind: str
    variant: str
    precision: str
    cores: list[CoreLedger]
    passes: list[PassTiming] = field(default_factory=list)
    prologue: int = 0
    epilogue: int = 0
    dma_cycles: int = 0
    elapsed_cycles: int = 0
    spikes_out: int = 0

    @property
    def compute_cycles(self) -> int:
        return sum(p.compute for p in self.passes)

    def total(self, name: str) -> int:
        return sum(getattr(c, name) for c in self.cores)

    def merge(self, other: "CostLedger") -> None:
        """Accumulate another execution of the same layer (e.g. a later timestep)."""
        for mine, theirs in zip(self.cores, other.cores):
            mine.merge(theirs)
        self.passes.extend(other.passes)
        self.prologue += other.prologue
        self.epilogue += other.epilogue
        self.dma_cycles += other.dma_cycles
        self.elapsed_cycles += other.elapsed_cycles
        self.spikes_out += other.spikes_out


# ---------------------------------------------------------------------------
# metrics

def elapsed(core: CoreLedger) -> int:
    if core.phase_open:
        raise MetricsError("ledger has an open phase")
    return core.busy_cycles


def _layer_elapsed(ledger: CostLedger) -> int:
    if ledger.elapsed_cycles <= 0:
        raise MetricsError(f"layer {ledger.layer!r} has zero elapsed cycles")
    return ledger.elapsed_cycles


def utilization(ledger: CostLedger) -> float:
    """Mean over cores of payload FP cycles per elapsed layer cycle."""
    e = _layer_elapsed(ledger)
    return sum(c.fp_useful_cycles for c in ledger.cores) / (len(ledger.cores) * e)


def ipc(ledger: CostLedger) -> float:
    e = _layer_elapsed(ledger)
    return sum(c.instructions_retired for c in ledger.cores) / (len(ledger.cores) * e)


def speedup(a, b) -> float:
    """Elapsed-time ratio ``a / b`` (>1 means ``b`` is faster)."""
    ea, eb = _cycles_of(a), _cycles_of(b)
    if eb == 0:
        raise MetricsError("speedup against zero elapsed cycles")
    return ea / eb


def _cycles_of(x) -> int:
    if isinstance(x, (int, float)):
        return x
    if isinstance(x, RunReport):
        return x.total_elapsed
    return x.elapsed_cycles


def composed_speedup(pairs) -> Fraction:
    """Network speedup from per-layer (a_cycles, b_cycles) pairs.

    Each layer speedup is weighted by its share of ``b`` cycles; the
    result is exactly ``sum(a) / sum(b)``.
    """
    pairs = list(pairs)
    total_b = sum(b for _, b in pairs)
    if total_b == 0:
        raise MetricsError("speedup against zero elapsed cycles")
    return sum((Fraction(b, total_b) * Fraction(a, b) for a, b in pairs if b), Fraction(0))


def footprint_report(maps, field_bits: int = 16, fields_per_event: int = 4) -> list[dict]:
    """Tabulate CSR vs AER bytes for named spike maps."""
    items = maps.items() if isinstance(maps, dict) else enumerate(maps)
    rows = []
    for name, m in items:
        csr = footprint_csr(m)
        aer = footprint_aer(m, field_bits, fields_per_event)
        rows.append({
            "layer": name,
            "nnz": m.nnz,
            "footprint_csr": csr,
            "footprint_aer": aer,
            "reduction": aer / csr if csr else math.inf,
        })
    return rows


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = (
    "layer", "variant", "precision", "elapsed", "fpu_util", "ipc",
    "footprint_csr", "footprint_aer", "speedup_vs_baseline",
)


@dataclass
class LayerMetrics:
    layer: str
    kind: str
    variant: str
    precision: str
    elapsed: int
    fpu_util: float
    ipc: float
    footprint_csr: float | None
    footprint_aer: float | None
    speedup_vs_baseline: float | None = None
    cycles_per_timestep: list[int] = field(default_factory=list)
    int_cycles: int = 0
    fp_useful_cycles: int = 0
    fp_total_cycles: int = 0
    instructions_retired: int = 0
    unpack_cycles: int = 0
    stream_setup_cycles: int = 0
    dma_cycles: int = 0
    spikes_out: int = 0
    passes: int = 0

    @classmethod
    def from_ledger(cls, ledger: CostLedger, cycles_per_timestep, footprints=(None, None)):
        return cls(
            layer=ledger.layer,
            kind=ledger.kind,
            variant=ledger.variant,
            precision=ledger.precision,
            elapsed=ledger.elapsed_cycles,
            fpu_util=utilization(ledger),
            ipc=ipc(ledger),
            footprint_csr=footprints[0],
            footprint_aer=footprints[1],
            cycles_per_timestep=list(cycles_per_timestep),
            int_cycles=ledger.total("int_cycles"),
            fp_useful_cycles=ledger.total("fp_useful_cycles"),
            fp_total_cycles=ledger.total("fp_total_cycles"),
            instructions_retired=ledger.total("instructions_retired"),
            unpack_cycles=ledger.total("unpack_cycles"),
            stream_setup_cycles=ledger.total("stream_setup_cycles"),
            dma_cycles=ledger.dma_cycles,
            spikes_out=ledger.spikes_out,
            passes=len(ledger.passes),
        )


@dataclass
class RunReport:
    config: dict
    layers: list[LayerMetrics]
    cores: int
    schema_version: int = SCHEMA_VERSION

    @property
    def total_elapsed(self) -> int:
        return sum(m.elapsed for m in self.layers)

    @property
    def aggregate(self) -> dict:
        e = self.total_elapsed
        if e == 0:
            raise MetricsError("run has zero elapsed cycles")
        return {
            "elapsed": e,
            "fpu_util": sum(m.fp_useful_cycles for m in self.layers) / (self.cores * e),
            "ipc": sum(m.instructions_retired for m in self.layers) / (self.cores * e),
            "unpack_cycles": sum(m.unpack_cycles for m in self.layers),
            "dma_cycles": sum(m.dma_cycles for m in self.layers),
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "cores": self.cores,
            "layers": [dataclasses.asdict(m) for m in self.layers],
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise MetricsError(f"report schema version {version!r}, expected {SCHEMA_VERSION}")
        layers = [LayerMetrics(**row) for row in data["layers"]]
        return cls(data["config"], layers, data["cores"], version)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version={self.schema_version}\n")
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for m in self.layers:
            w.writerow(dataclasses.asdict(m))
        return buf.getvalue()


def compare_reports(baseline: RunReport, other: RunReport) -> list[dict]:
    """Per-layer speedup of ``other`` relative to ``baseline`` plus a total row."""
    if baseline.schema_version != other.schema_version:
        raise MetricsError("schema versions differ")
    names_a = [m.layer for m in baseline.layers]
    names_b = [m.layer for m in other.layers]
    if names_a != names_b:
        raise MetricsError(f"layer lists differ: {names_a} vs {names_b}")
    rows = []
    for a, b in zip(baseline.layers, other.layers):
        rows.append({
            "layer": a.layer,
            "elapsed_a": a.elapsed,
            "elapsed_b": b.elapsed,
            "speedup": speedup(a.elapsed, b.elapsed),
            "fpu_util_a": a.fpu_util,
            "fpu_util_b": b.fpu_util,
        })
    rows.append({
        "layer": "total",
        "elapsed_a": baseline.total_elapsed,
        "elapsed_b": other.total_elapsed,
        "speedup": speedup(baseline, other),
        "fpu_util_a": baseline.aggregate["fpu_util"],
        "fpu_util_b": other.aggregate["fpu_util"],
    })
    return rows
