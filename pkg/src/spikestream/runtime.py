"""Network execution: SPM tiling, double-buffered DMA and the timestep loop.

A layer runs as a sequence of *passes*. The ifmap is split into
output-row tiles and the weights into output-channel-group tiles; the
ifmap tile is the outer loop and the weight tile the inner one, so a
tile's compressed ofmap is complete before it is copied out. While pass
``i`` computes, the DMA engine stores the tile finished before it and
loads the operands of pass ``i + 1``. Pass ``i + 1`` starts when both
its predecessor and its loads are done, which gives::

    elapsed = prologue + sum_i max(compute_i, dma_{i+1}) + epilogue

Membrane potentials travel with the ifmap tile: a tile's v slice is
loaded with the tile and stored with its ofmap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import DmaParams, LayerSpec, NetworkConfig
from .errors import ConfigError, FormatError, SpmOverflow
from .fileio import read_sdns
from .formats import (
    CompressedSpikeMap,
    DenseBinaryMap,
    DenseTensor,
    FcSpikeList,
    WeightTensor,
    compress,
    compress_fc,
    flatten_to_fc,
    footprint_aer,
    footprint_csr,
    sptr_width_for,
)
from .kernels import (
    ConvLayerDesc,
    EncodeLayerDesc,
    OfmapBuilder,
    _next_pow2,
    builder_to_fc,
    conv_pass,
    encode_pass,
    fc_pass,
    im2row,
    join_sptr,
    ofmap_index_width,
)
from .neuron import F32, Precision, precision
from .perf import CoreLedger, CostLedger, CostParams, LayerMetrics, PassTiming, RunReport

__all__ = [
    "DmaModel", "LayerPlan", "TilingPlan", "plan_tiles", "plan_layer", "run_layer",
    "run_network", "NetworkResult", "join_sptr", "generate_weights", "generate_input",
    "timeline",
]

WORD = 8
INDEX_WIDTH = 16


@dataclass(frozen=True)
class DmaModel:
    """Transfer cost: one latency per batch of requests plus payload beats.

    A single transfer costs ``latency + ceil(bytes / (bus_width / 8))``.
    Requests queued back to back share the latency and pay
    ``request_overhead`` cycles each beyond the first.
    """

    bus_width: int = 512
    latency: int = 100
    request_overhead: int = 1
    join_cycles_per_location: int = 2

    @classmethod
    def from_params(cls, p: DmaParams) -> "DmaModel":
        return cls(p.bus_width, p.latency, p.request_overhead, p.join_cycles_per_location)

    @property
    def beat_bytes(self) -> int:
        return self.bus_width // 8

    def transfer(self, nbytes: int) -> int:
        return self.latency + math.ceil(nbytes / self.beat_bytes)

    def transfer_2d(self, row_bytes: int, rows: int) -> int:
        return self.latency + rows * math.ceil(row_bytes / self.beat_bytes)

    def batch(self, sizes) -> int:
        sizes = [int(s) for s in sizes if s > 0]
        if not sizes:
            return 0
        beats = sum(math.ceil(s / self.beat_bytes) for s in sizes)
        return self.latency + beats + (len(sizes) - 1) * self.request_overhead


# ---------------------------------------------------------------------------
# tiling

@dataclass(frozen=True)
class LayerPlan:
    name: str
    kind: str
    weight_tiles: tuple          # ((g0, g1), ...)
    row_tiles: tuple             # output rows ((r0, r1), ...)
    buffers: dict                # name -> bytes per buffer
    live_bytes: int
    capacity: int

    @property
    def passes(self) -> list[tuple[int, int]]:
        return [(t, w) for t in range(len(self.row_tiles)) for w in range(len(self.weight_tiles))]


@dataclass(frozen=True)
class TilingPlan:
    layers: tuple
    capacity: int

    def __getitem__(self, i) -> LayerPlan:
        return self.layers[i]


def _layer_bytes(kind, in_shape, out_shape, k, s, n_g, rows, simd, elem_bytes):
    """Per-buffer byte sizes for ``rows`` output rows and ``n_g`` groups per weight tile."""
    c_out = out_shape[-1]
    groups = -(-c_out // simd)
    ob = ofmap_index_width(c_out, INDEX_WIDTH) // 8
    if kind == "fc":
        n = in_shape[0]
        ib = ofmap_index_width(n, INDEX_WIDTH) // 8
        return {
            "weights": n * _next_pow2(n_g) * WORD,
            "ifmap": (n + 1) * ib,
            "v": groups * WORD,
            "ofmap": c_out * ob,
        }
    h, w, c_in = in_shape
    of_w = out_shape[1]
    in_rows = (rows - 1) * s + k
    if kind == "encode":
        K = k * k * c_in
        return {
            "weights": K * n_g * WORD,
            "ifmap": rows * of_w * K * elem_bytes,
            "v": rows * of_w * groups * WORD,
            "ofmap": rows * of_w * c_out * ob,
        }
    ib = ofmap_index_width(c_in, INDEX_WIDTH) // 8
    sb = sptr_width_for(h, w, c_in, ib * 8) // 8
    return {
        "weights": k * k * c_in * _next_pow2(n_g) * WORD,
        # worst case: every input channel spikes
        "ifmap": (in_rows * w + 1) * sb + in_rows * w * c_in * ib,
        "v": rows * of_w * groups * WORD,
        "ofmap": rows * of_w * c_out * ob,
    }


def _live(b: dict) -> int:
    # every buffer is double buffered
    return 2 * sum(b.values())


def plan_layer(layer: LayerSpec, in_shape, out_shape, simd: int, elem_bytes: int,
               capacity: int, weight_fraction: float = 0.5) -> LayerPlan:
    k, s = layer.kernel, layer.stride
    of_h = 1 if layer.kind == "fc" else out_shape[0]
    groups = -(-layer.c_out // simd)

    def size(n_g, rows):
        return _layer_bytes(layer.kind, in_shape, out_shape, k, s, n_g, rows, simd, elem_bytes)

    minimal = _live(size(1, 1))
    if minimal > capacity:
        raise SpmOverflow(layer.name, minimal, capacity)

    if layer.weight_groups is not None:
        gpt = min(layer.weight_groups, groups)
    else:
        budget = capacity * weight_fraction / 2
        gpt = 1
        for n in range(1, groups + 1):
            if size(n, 1)["weights"] <= budget:
                gpt = n
        while gpt > 1 and _live(size(gpt, 1)) > capacity:
            gpt -= 1
    if layer.tile_rows is not None:
        rows = min(layer.tile_rows, of_h)
    else:
        rows = 1
        for r in range(1, of_h + 1):
            if _live(size(gpt, r)) <= capacity:
                rows = r
    live = _live(size(gpt, rows))
    if live > capacity:
        raise SpmOverflow(layer.name, live, capacity)
    weight_tiles = tuple((g, min(g + gpt, groups)) for g in range(0, groups, gpt))
    row_tiles = tuple((r, min(r + rows, of_h)) for r in range(0, of_h, rows))
    return LayerPlan(layer.name, layer.kind, weight_tiles, row_tiles, size(gpt, rows), live, capacity)


def plan_tiles(cfg: NetworkConfig, spm_capacity: int | None = None) -> TilingPlan:
    capacity = spm_capacity or cfg.spm_capacity
    prec = precision(cfg.precision)
    plans = tuple(
        plan_layer(layer, i, o, prec.simd_width, prec.elem_bytes, capacity, cfg.weight_fraction)
        for layer, (i, o) in zip(cfg.layers, cfg.shapes())
    )
    return TilingPlan(plans, capacity)


# ---------------------------------------------------------------------------
# double-buffered timeline

def timeline(loads, computes, stores):
    """Event-driven replay of compute and a FIFO DMA engine.

    ``loads[i]``: DMA cycles to bring in pass ``i``'s operands.
    ``stores[i]``: DMA cycles to write back what pass ``i`` completed.
    Loads for pass ``i + 1`` may start once pass ``i`` starts (its buffer
    pair is free); stores become ready when their pass ends.
    Returns ``(elapsed, passes, prologue, epilogue)``.
    """
    n = len(computes)
    prologue = loads[0]
    dma_free = prologue
    start = prologue
    passes = []
    prev_end = None
    for i in range(n):
        end = start + computes[i]
        queue = []
        if i and stores[i - 1]:
            queue.append((prev_end, stores[i - 1]))
        if i + 1 < n and loads[i + 1]:
            queue.append((start, loads[i + 1]))
        window_start = max(dma_free, start)
        for ready, cycles in queue:
            dma_free = max(dma_free, ready) + cycles
        window = max(0, dma_free - window_start) if queue else 0
        passes.append(PassTiming(computes[i], window))
        prev_end = end
        start = max(end, dma_free)
    epilogue = stores[-1]
    elapsed = max(start, dma_free) + epilogue
    return elapsed, passes, prologue, epilogue


# ---------------------------------------------------------------------------
# layer execution

@dataclass
class LayerContext:
    """Everything a layer needs besides its operands."""

    cores: int = 8
    variant: str = "streamed"
    prec: Precision = field(default_factory=lambda: precision("fp16"))
    params: CostParams = field(default_factory=CostParams)
    dma: DmaModel = field(default_factory=DmaModel)
    engine: str = "batch"
    policy: str = "steal"


def _map_bytes(m) -> list[int]:
    if isinstance(m, FcSpikeList):
        return [footprint_csr(m)]
    return [m.s_ptr.nbytes, m.nnz * m.index_width // 8]


def run_layer(plan: LayerPlan, layer: LayerSpec, inp, v: np.ndarray, weights: WeightTensor,
              lif, ctx: LayerContext):
    """Execute one layer for one timestep following ``plan``.

    Returns ``(ofmap, v_next, ledger)``; the ofmap equals an untiled run.
    """
    kind = layer.kind
    v = np.array(v, dtype=F32, copy=True)
    n_w = len(plan.weight_tiles)
    core_totals = [CoreLedger(c, ctx.params.conflict_penalty) for c in range(ctx.cores)]
    loads, computes, stores = [], [], []
    tiles_out = []
    spikes = 0
    wb = weights.word_bytes
    kw = dict(engine=ctx.engine, params=ctx.params, prec=ctx.prec, policy=ctx.policy, name=layer.name)

    if kind == "conv":
        desc = ConvLayerDesc(inp.height, inp.width, inp.channels, layer.c_out, layer.kernel,
                             layer.kernel, layer.stride, lif, weights.simd_width, ctx.variant)
        of_w = desc.of_w
        out_iw = ofmap_index_width(layer.c_out, INDEX_WIDTH)
    elif kind == "encode":
        desc = EncodeLayerDesc(*inp.shape, layer.c_out, layer.kernel, layer.kernel, layer.stride,
                               lif, weights.simd_width, ctx.variant)
        of_w = desc.of_w
        out_iw = ofmap_index_width(layer.c_out, INDEX_WIDTH)
        rows_all = im2row(inp, layer.kernel, layer.kernel, layer.stride)
        v = v.reshape(-1, layer.c_out)
    else:
        of_w = 1
        out_iw = ofmap_index_width(layer.c_out, INDEX_WIDTH)

    for t, (r0, r1) in enumerate(plan.row_tiles):
        R = r1 - r0
        if kind == "conv":
            in0, in1 = r0 * layer.stride, (r1 - 1) * layer.stride + layer.kernel
            tile = inp.rows(in0, in1)
            tdesc = desc.with_rows(in1 - in0)
            v_t = v[r0:r1].copy()
            in_bytes = _map_bytes(tile)
        elif kind == "encode":
            x_t = rows_all[r0 * of_w:r1 * of_w]
            v_t = v[r0 * of_w:r1 * of_w].copy()
            in_bytes = [x_t.shape[0] * x_t.shape[1] * ctx.prec.elem_bytes]
        else:
            v_t = v.copy()
            in_bytes = _map_bytes(inp)
        builder = OfmapBuilder(R if kind != "fc" else 1, of_w, layer.c_out, index_width=out_iw)
        groups_total = weights.groups
        v_bytes = v_t.size // layer.c_out * groups_total * WORD if kind != "fc" else groups_total * WORD

        for w, (g0, g1) in enumerate(plan.weight_tiles):
            reqs = []
            if n_w > 1 or t == 0:
                K = weights.k_h * weights.k_w * weights.c_in
                pitch = (g1 - g0) if kind == "encode" else _next_pow2(g1 - g0)
                reqs.append(K * pitch * wb)
            if w == 0:
                reqs += in_bytes + [v_bytes]
            loads.append(ctx.dma.batch(reqs))
            if kind == "conv":
                v_t, led, _ = conv_pass(tile, weights, v_t, tdesc, builder, ctx.cores, groups=(g0, g1), **kw)
            elif kind == "encode":
                v_t, led, _ = encode_pass(x_t, weights, v_t, desc, builder, ctx.cores, groups=(g0, g1), **kw)
            else:
                v_t, led, _ = fc_pass(inp, weights, v_t, lif, ctx.variant, builder, ctx.cores,
                                      groups=(g0, g1), **kw)
            computes.append(led.elapsed_cycles)
            spikes += led.spikes_out
            for total, core in zip(core_totals, led.cores):
                total.merge(core)
            if w == n_w - 1:
                seg = builder.segment_bytes()
                # one request per fragment, then s_ptr and v
                store = ctx.dma.batch(list(seg) + [(builder.n_locations + 1) * 4, v_bytes])
                stores.append(store + ctx.dma.join_cycles_per_location * builder.n_locations)
            else:
                stores.append(0)

        if kind == "conv":
            v[r0:r1] = v_t
            tiles_out.append(join_sptr(builder))
        elif kind == "encode":
            v[r0 * of_w:r1 * of_w] = v_t
            tiles_out.append(join_sptr(builder))
        else:
            v = v_t
            tiles_out.append(builder_to_fc(builder))

    elapsed, passes, prologue, epilogue = timeline(loads, computes, stores)
    if kind == "fc":
        out = tiles_out[0]
    else:
        out = CompressedSpikeMap.vstack(tiles_out) if len(tiles_out) > 1 else tiles_out[0]
    if kind == "encode":
        v = v.reshape(desc.of_h, desc.of_w, layer.c_out)
    ledger = CostLedger(
        layer=layer.name, kind=kind, variant=ctx.variant, precision=ctx.prec.name,
        cores=core_totals, passes=passes, prologue=prologue, epilogue=epilogue,
        dma_cycles=sum(loads) + sum(stores), elapsed_cycles=elapsed, spikes_out=spikes,
    )
    return out, v, ledger


# ---------------------------------------------------------------------------
# network

def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def generate_weights(cfg: NetworkConfig) -> list[WeightTensor]:
    prec = precision(cfg.precision, cfg.strict_precision)
    out = []
    for i, (layer, (in_shape, _)) in enumerate(zip(cfg.layers, cfg.shapes())):
        if layer.kind == "fc":
            shape = (in_shape[0], layer.c_out)
        else:
            shape = (layer.kernel, layer.kernel, in_shape[2], layer.c_out)
        if layer.weights:
            try:
                w = read_sdns(layer.weights).astype(F32)
            except (OSError, FormatError) as exc:
                raise ConfigError(f"layer[{i}].weights", str(exc)) from exc
            if w.shape != shape:
                raise ConfigError(f"layer[{i}].weights", f"shape {w.shape}, layer needs {shape}")
        else:
            w = _rng(cfg.seed, 1, i).normal(layer.weight_mean, layer.weight_std, shape).astype(F32)
        out.append(WeightTensor.from_dense(prec.round(w), prec.simd_width))
    return out


def generate_input(cfg: NetworkConfig, timestep: int):
    """Layer-1 input: a dense image for encode layers, else Bernoulli spikes."""
    first = cfg.layers[0]
    if first.kind == "encode":
        rng = _rng(cfg.seed, 2)
        img = rng.random(cfg.input_shape, dtype=np.float64).astype(F32)
        return DenseTensor(precision(cfg.precision, cfg.strict_precision).round(img))
    rng = _rng(cfg.seed, 3, timestep)
    bits = rng.random(cfg.input_shape) < first.input_rate
    if first.kind == "fc":
        return compress_fc(bits.ravel(), ofmap_index_width(bits.size, INDEX_WIDTH))
    return compress(DenseBinaryMap.from_array(bits), ofmap_index_width(cfg.input_shape[2], INDEX_WIDTH))


def _initial_state(cfg: NetworkConfig) -> list[np.ndarray]:
    return [np.zeros(o, F32) for _, o in cfg.shapes()]


@dataclass
class NetworkResult:
    outputs: list        # outputs[t][layer]
    states: list         # final v per layer
    ledgers: list        # per-layer CostLedger merged over timesteps
    report: RunReport
    plan: TilingPlan

    def spike_counts(self) -> list[list[int]]:
        return [[o.nnz for o in step] for step in self.outputs]


def run_network(cfg: NetworkConfig, inputs=None, *, engine: str = "batch", policy: str = "steal",
                plan: TilingPlan | None = None, weights: list | None = None) -> NetworkResult:
    """Run all timesteps layer by layer; v persists per layer across timesteps.

    ``inputs`` is one layer-1 input reused every timestep (a DenseTensor
    for encode networks), a list with one input per timestep, or None to
    generate from the config seed.
    """
    plan = plan or plan_tiles(cfg)
    weights = weights or generate_weights(cfg)
    prec = precision(cfg.precision, cfg.strict_precision)
    ctx = LayerContext(cfg.cores, cfg.variant, prec, cfg.cost_params,
                       DmaModel.from_params(cfg.dma), engine, policy)
    states = _initial_state(cfg)
    outputs, ledgers = [], [None] * len(cfg.layers)
    per_step = [[] for _ in cfg.layers]
    fp_csr = [0.0] * len(cfg.layers)
    fp_aer = [0.0] * len(cfg.layers)

    for t in range(cfg.timesteps):
        if inputs is None:
            x = generate_input(cfg, t)
        elif isinstance(inputs, (list, tuple)):
            x = inputs[t]
        else:
            x = inputs
        step_out = []
        for i, layer in enumerate(cfg.layers):
            if layer.kind == "fc" and isinstance(x, CompressedSpikeMap):
                x = flatten_to_fc(x, ofmap_index_width(x.n_locations * x.channels, INDEX_WIDTH))
            if layer.kind != "encode":
                fp_csr[i] += footprint_csr(x)
                fp_aer[i] += footprint_aer(x)
            x, states[i], led = run_layer(plan[i], layer, x, states[i], weights[i],
                                          cfg.layer_lif(layer), ctx)
            per_step[i].append(led.elapsed_cycles)
            if ledgers[i] is None:
                ledgers[i] = led
            else:
                ledgers[i].merge(led)
            step_out.append(x)
        outputs.append(step_out)

    metrics = []
    for i, layer in enumerate(cfg.layers):
        fps = (None, None) if layer.kind == "encode" else (
            fp_csr[i] / cfg.timesteps, fp_aer[i] / cfg.timesteps)
        metrics.append(LayerMetrics.from_ledger(ledgers[i], per_step[i], fps))
    report = RunReport(cfg.to_dict(), metrics, cfg.cores)
    return NetworkResult(outputs, states, ledgers, report, plan)
