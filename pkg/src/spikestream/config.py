"""Network configuration: declarative TOML documents mirroring :class:`NetworkConfig`.

A config looks like::

    name = "tiny"
    timesteps = 1
    cores = 8
    precision = "fp16"
    seed = 0

    [input]
    shape = [8, 8, 3]

    [lif]
    alpha = 0.9
    v_th = 1.0

    [[layer]]
    name = "enc"
    kind = "encode"
    c_out = 8
    kernel = 3

Validation errors raise :class:`~spikestream.errors.ConfigError` naming
the offending field (``layer[2].stride``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .neuron import PRECISIONS, LifParams
from .perf import CostParams

LAYER_KINDS = ("encode", "conv", "fc")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    c_out: int
    kernel: int = 3
    stride: int = 1
    lif: LifParams | None = None
    weight_mean: float = 0.0
    weight_std: float = 0.1
    input_rate: float = 0.1  # Bernoulli rate when this layer's input is generated
    tile_rows: int | None = None
    weight_groups: int | None = None
    weights: str | None = None  # SDNS file; generated from the seed when absent


@dataclass(frozen=True)
class DmaParams:
    bus_width: int = 512
    latency: int = 100
    request_overhead: int = 1
    join_cycles_per_location: int = 2


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    input_shape: tuple
    layers: tuple
    timesteps: int = 1
    cores: int = 8
    precision: str = "fp16"
    variant: str = "streamed"
    seed: int = 0
    lif: LifParams = field(default_factory=LifParams)
    cost: dict = field(default_factory=dict)
    dma: DmaParams = field(default_factory=DmaParams)
    spm_capacity: int = 128 * 1024
    weight_fraction: float = 0.5
    strict_precision: bool = False

    def __post_init__(self):
        _validate(self)

    @property
    def simd_width(self) -> int:
        return PRECISIONS[self.precision].simd_width

    @property
    def cost_params(self) -> CostParams:
        return CostParams().with_overrides(self.cost)

    def layer_lif(self, layer: LayerSpec) -> LifParams:
        return layer.lif or self.lif

    def shapes(self) -> list[tuple[tuple, tuple]]:
        """(input, output) shape per layer; spatial shapes are (H, W, C), FC shapes (N,)."""
        out = []
        cur = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == "fc":
                n = cur[0] * cur[1] * cur[2] if len(cur) == 3 else cur[0]
                nxt = (layer.c_out,)
                out.append(((n,), nxt))
            else:
                if len(cur) != 3:
                    raise ConfigError(f"layer[{i}].kind", f"{layer.kind} layer cannot follow an FC layer")
                h, w, c = cur
                k, s = layer.kernel, layer.stride
                if k > h or k > w or (h - k) % s or (w - k) % s:
                    raise ConfigError(
                        f"layer[{i}].stride",
                        f"kernel {k} stride {s} does not tile the {h}x{w} input without padding",
                    )
                nxt = ((h - k) // s + 1, (w - k) // s + 1, layer.c_out)
                out.append((cur, nxt))
            cur = nxt
        return out

    def select(self, first: int, last: int) -> "NetworkConfig":
        """Sub-network of layers ``first..last`` (1-based, inclusive)."""
        n = len(self.layers)
        if not 1 <= first <= last <= n:
            raise ConfigError("layers", f"range {first}:{last} outside 1..{n}")
        in_shape = self.shapes()[first - 1][0]
        return dataclasses.replace(self, input_shape=in_shape, layers=self.layers[first - 1:last])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["layers"] = [
            {k: v for k, v in dataclasses.asdict(layer).items() if v is not None} for layer in self.layers
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        try:
            layers = tuple(
                LayerSpec(**{**l, "lif": _lif(l["lif"], f"layer[{i}].lif") if l.get("lif") else None})
                for i, l in enumerate(d.pop("layers"))
            )
            d["input_shape"] = tuple(d["input_shape"])
            d["lif"] = _lif(d.get("lif") or {}, "lif")
            d["dma"] = DmaParams(**(d.get("dma") or {}))
            return cls(layers=layers, **d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


def _lif(d: dict, where: str) -> LifParams:
    try:
        return LifParams(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from exc


def _validate(cfg: NetworkConfig) -> None:
    if cfg.precision not in PRECISIONS:
        raise ConfigError("precision", f"must be one of {sorted(PRECISIONS)}")
    if cfg.variant not in ("baseline", "streamed"):
        raise ConfigError("variant", "must be baseline or streamed")
    for name in ("timesteps", "cores", "spm_capacity"):
        if not isinstance(getattr(cfg, name), int) or getattr(cfg, name) < 1:
            raise ConfigError(name, "must be a positive integer")
    if len(cfg.input_shape) not in (1, 3) or min(cfg.input_shape) < 1:
        raise ConfigError("input.shape", "must be [H, W, C] or [N] with positive entries")
    if not 0 < cfg.weight_fraction < 1:
        raise ConfigError("weight_fraction", "must lie in (0, 1)")
    if not cfg.layers:
        raise ConfigError("layer", "at least one layer is required")
    for i, layer in enumerate(cfg.layers):
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"layer[{i}].kind", f"must be one of {LAYER_KINDS}")
        if layer.kind == "encode" and i != 0:
            raise ConfigError(f"layer[{i}].kind", "the encode layer must come first")
        for attr in ("c_out", "kernel", "stride"):
            v = getattr(layer, attr)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"layer[{i}].{attr}", "must be a positive integer")
        if not 0.0 <= layer.input_rate <= 1.0:
            raise ConfigError(f"layer[{i}].input_rate", "must lie in [0, 1]")
        if layer.weight_std < 0:
            raise ConfigError(f"layer[{i}].weight_std", "must be >= 0")
        for attr in ("tile_rows", "weight_groups"):
            v = getattr(layer, attr)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"layer[{i}].{attr}", "must be a positive integer")
    if cfg.layers[0].kind != "fc" and len(cfg.input_shape) != 3:
        raise ConfigError("input.shape", "spatial first layer needs [H, W, C]")
    CostParams().with_overrides(cfg.cost)
    cfg.shapes()


_TOP_KEYS = {"name", "timesteps", "cores", "precision", "variant", "seed", "spm_capacity",
             "weight_fraction", "strict_precision", "input", "lif", "cost", "dma", "layer"}
_LAYER_KEYS = {f.name for f in dataclasses.fields(LayerSpec)}


def parse_config(text: str, source: str = "<config>") -> NetworkConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(source, f"not valid TOML: {exc}") from exc
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    if "input" not in doc or "shape" not in doc["input"]:
        raise ConfigError("input.shape", "missing")
    layers = []
    for i, l in enumerate(doc.get("layer", [])):
        bad = set(l) - _LAYER_KEYS
        if bad:
            raise ConfigError(f"layer[{i}].{sorted(bad)[0]}", "unknown key")
        for req in ("kind", "c_out"):
            if req not in l:
                raise ConfigError(f"layer[{i}].{req}", "missing")
        l = dict(l)
        l.setdefault("name", f"L{i + 1}")
        if "weights" in l:
            l["weights"] = str((Path(source).parent / l["weights"]).resolve())
        if "lif" in l:
            l["lif"] = _lif(l["lif"], f"layer[{i}].lif")
        layers.append(LayerSpec(**l))
    top = {k: v for k, v in doc.items() if k not in ("input", "lif", "dma", "layer")}
    try:
        dma = DmaParams(**doc.get("dma", {}))
    except TypeError as exc:
        raise ConfigError("dma", str(exc)) from exc
    return NetworkConfig(
        input_shape=tuple(doc["input"]["shape"]),
        layers=tuple(layers),
        lif=_lif(doc.get("lif", {}), "lif"),
        dma=dma,
        **{"name": Path(source).stem, **top},
    )


def load_config(path) -> NetworkConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))


def bundled_config_path(name: str = "svgg11-toy.cfg") -> Path:
    return Path(__file__).with_name("data") / name
