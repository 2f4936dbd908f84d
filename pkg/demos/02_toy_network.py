"""
Running the bundled toy network
===============================

Simulate all eleven layers for both kernel variants and two storage
precisions, then tabulate per-layer speedups.
"""

from spikestream import bundled_config_path, compare_reports, load_config, run_network

cfg = load_config(bundled_config_path())
print(cfg.name, "input", cfg.input_shape, "->", [s[1] for s in cfg.shapes()][-1])

reports = {}
for precision in ("fp16", "fp8"):
    for variant in ("baseline", "streamed"):
        res = run_network(cfg.replace(precision=precision, variant=variant))
        reports[variant, precision] = res.report
        agg = res.report.aggregate
        print(f"{variant:9s} {precision}  cycles {agg['elapsed']:7d}  FPU util {agg['fpu_util']:.3f}")

#%%
# Firing rate per layer (spikes over output neurons), from the last run.
for layer, (_, out_shape), n in zip(cfg.layers, cfg.shapes(), res.spike_counts()[0]):
    size = 1
    for d in out_shape:
        size *= d
    print(f"{layer.name:4s} {layer.kind:6s} rate {n / size:.3f}")

#%%
# Per-layer speedup of the streamed kernels at FP16.
for row in compare_reports(reports["baseline", "fp16"], reports["streamed", "fp16"]):
    print(f"{row['layer']:6s} {row['speedup']:.2f}x")

e16 = reports["streamed", "fp16"].total_elapsed
e8 = reports["streamed", "fp8"].total_elapsed
print(f"FP8 over FP16: {e16 / e8:.2f}x (unpack cycles do not shrink with wider SIMD)")
