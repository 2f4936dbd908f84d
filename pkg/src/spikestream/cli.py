"""Command-line front end.

Subcommands::

    run        simulate a network config and write a report
    compare    per-layer speedup between two JSON reports
    footprint  CSR vs AER footprint of spike maps (files or generated)
    gen        write synthetic SSPK spike maps or SDNS dense tensors

Exit status is 1 for configuration, schema or file-format errors and 2
for simulation errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import bundled_config_path, load_config
from .errors import ConfigError, FormatError, MetricsError, SpikeStreamError
from .fileio import read_sdns, read_sspk, write_sdns, write_sspk
from .formats import DenseBinaryMap, DenseTensor, compress
from .perf import RunReport, compare_reports, footprint_report, load_cost_overrides
from .runtime import run_network


def _geometry(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"geometry must look like 16x16x64, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"geometry needs three positive dims, got {text!r}")
    return dims


def _layer_range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--layers expects FIRST:LAST, got {text!r}") from None


def _rates(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"rates must be comma separated floats, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikestream", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a network")
    r.add_argument("--config", default=str(bundled_config_path()),
                   help="network config (default: bundled svgg11-toy.cfg)")
    r.add_argument("--variant", choices=("baseline", "streamed"))
    r.add_argument("--precision", choices=("fp32", "fp16", "fp8"))
    r.add_argument("--cores", type=int)
    r.add_argument("--timesteps", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--layers", type=_layer_range, help="run only layers FIRST:LAST (1-based)")
    r.add_argument("--input", help="layer-1 input: SSPK spike map or SDNS dense image")
    r.add_argument("--strict-precision", action="store_true",
                   help="round accumulations to the storage format")
    r.add_argument("--engine", choices=("batch", "step"), default="batch")
    r.add_argument("--policy", choices=("steal", "static"), default="steal")
    r.add_argument("--out", help="report path (default: stdout)")
    r.add_argument("--format", choices=("json", "csv"), default="json")

    c = sub.add_parser("compare", help="speedup table from two JSON reports")
    c.add_argument("baseline")
    c.add_argument("other")
    c.add_argument("--format", choices=("table", "json", "csv"), default="table")

    f = sub.add_parser("footprint", help="CSR vs AER footprint")
    f.add_argument("files", nargs="*", help="SSPK spike maps")
    f.add_argument("--gen", type=_rates, help="comma-separated firing rates to generate, one map each")
    f.add_argument("--geometry", type=_geometry, default=(16, 16, 64))
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--format", choices=("table", "json", "csv"), default="table")

    g = sub.add_parser("gen", help="write synthetic inputs")
    g.add_argument("--geometry", type=_geometry, required=True, help="HxWxC")
    g.add_argument("--rate", type=float, default=0.1, help="Bernoulli spike rate (spike maps)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dense", action="store_true", help="write a uniform [0, 1) SDNS image instead")
    g.add_argument("--index-width", type=int, choices=(8, 16, 32), default=16)
    g.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {k: v for k, v in {
        "variant": args.variant, "precision": args.precision, "cores": args.cores,
        "timesteps": args.timesteps, "seed": args.seed,
    }.items() if v is not None}
    if args.strict_precision:
        overrides["strict_precision"] = True
    cost = load_cost_overrides()
    if cost:
        overrides["cost"] = {**cfg.cost, **cost}
    cfg = cfg.replace(**overrides)
    if args.layers:
        cfg = cfg.select(*args.layers)
    inputs = _load_input(args.input) if args.input else None
    result = run_network(cfg, inputs, engine=args.engine, policy=args.policy)
    text = result.report.to_json() if args.format == "json" else result.report.to_csv()
    _emit(text, args.out)
    if args.out:
        agg = result.report.aggregate
        print(f"{cfg.name}: {len(cfg.layers)} layers, {cfg.timesteps} timestep(s), "
              f"{agg['elapsed']} cycles, FPU util {agg['fpu_util']:.3f} -> {args.out}")
    return 0


def _load_input(path: str):
    data = Path(path).read_bytes()
    try:
        if data[:4] == b"SSPK":
            return read_sspk(path)
        if data[:4] == b"SDNS":
            return DenseTensor(read_sdns(path))
    except SpikeStreamError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    raise FormatError(f"{path}: neither an SSPK nor an SDNS file")


def _read_report(path: str) -> RunReport:
    try:
        return RunReport.from_json(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MetricsError(f"{path} is not a JSON report: {exc}") from exc
    except (KeyError, TypeError) as exc:
        raise MetricsError(f"{path} does not match the report schema: {exc}") from exc


def cmd_compare(args) -> int:
    rows = compare_reports(_read_report(args.baseline), _read_report(args.other))
    _print_rows(rows, args.format, ("layer", "elapsed_a", "elapsed_b", "speedup", "fpu_util_a", "fpu_util_b"))
    return 0


def cmd_footprint(args) -> int:
    maps = {}
    for path in args.files:
        maps[Path(path).name] = read_sspk(path)
    if args.gen:
        rng = np.random.default_rng(args.seed)
        for i, rate in enumerate(args.gen):
            if not 0 <= rate <= 1:
                raise ConfigError("--gen", f"rate {rate} outside [0, 1]")
            maps[f"gen{i}@{rate:g}"] = compress(DenseBinaryMap.from_array(rng.random(args.geometry) < rate))
    if not maps:
        raise ConfigError("footprint", "give SSPK files or --gen rates")
    rows = footprint_report(maps)
    csr = sum(r["footprint_csr"] for r in rows)
    aer = sum(r["footprint_aer"] for r in rows)
    rows.append({"layer": "total", "nnz": sum(r["nnz"] for r in rows), "footprint_csr": csr,
                 "footprint_aer": aer, "reduction": aer / csr if csr else 0.0})
    _print_rows(rows, args.format, ("layer", "nnz", "footprint_csr", "footprint_aer", "reduction"))
    return 0


def cmd_gen(args) -> int:
    if not 0 <= args.rate <= 1:
        raise ConfigError("--rate", "must lie in [0, 1]")
    rng = np.random.default_rng(args.seed)
    if args.dense:
        write_sdns(args.out, rng.random(args.geometry).astype(np.float32))
    else:
        bits = rng.random(args.geometry) < args.rate
        write_sspk(args.out, compress(DenseBinaryMap.from_array(bits), args.index_width))
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _print_rows(rows, fmt, cols) -> None:
    if fmt == "json":
        print(json.dumps(rows, indent=2))
        return
    if fmt == "csv":
        print(",".join(cols))
        for r in rows:
            print(",".join(str(r[c]) for c in cols))
        return
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths))))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "footprint": cmd_footprint, "gen": cmd_gen}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MetricsError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SpikeStreamError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
