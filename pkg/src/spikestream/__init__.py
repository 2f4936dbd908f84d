"""Compressed spiking-network inference on a modeled stream-register cluster.

The package simulates sparse SNN layers on an eight-core cluster whose
cores gather weights through indirect stream registers, and reports
cycle-level performance next to exact functional results.
"""

from .config import LayerSpec, NetworkConfig, bundled_config_path, load_config, parse_config
from .errors import (
    BufferOverflow,
    ConfigError,
    DoubleUpdate,
    FormatError,
    GeometryMismatch,
    IndexWidthOverflow,
    MalformedMap,
    MetricsError,
    OutOfSpm,
    SlotCapability,
    SpikeStreamError,
    SpmOverflow,
    SpmWriteConflict,
    StreamExhausted,
)
from .fileio import read_sdns, read_sspk, write_sdns, write_sspk
from .formats import (
    AerEvent,
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
    to_aer,
)
from .kernels import (
    ConvLayerDesc,
    EncodeLayerDesc,
    OfmapBuilder,
    RfCursor,
    conv_layer,
    encode_layer,
    fc_layer,
    im2row,
    join_sptr,
    spva_baseline,
    spva_streamed,
)
from .neuron import LifParams, NeuronState, Precision, act_fun_simd, lif_update, precision
from .perf import (
    CostLedger,
    CostParams,
    LayerMetrics,
    RunReport,
    compare_reports,
    composed_speedup,
    footprint_report,
    ipc,
    speedup,
    utilization,
)
from .runtime import DmaModel, TilingPlan, plan_tiles, run_layer, run_network

__version__ = "0.1.0"
