"""
Spike maps and the two SpVA kernels
===================================

Compress a random binary feature map, compare its footprint against
address-event records, then push it through one convolution layer with
the explicit-load kernel and the indirect-stream kernel.
"""

import numpy as np

from spikestream import (
    ConvLayerDesc, DenseBinaryMap, LifParams, WeightTensor, compress, conv_layer,
    footprint_aer, footprint_csr, utilization,
)

rng = np.random.default_rng(0)

# a 10x10 map with 256 channels, 15% of neurons firing
bits = rng.random((10, 10, 256)) < 0.15
ifmap = compress(DenseBinaryMap.from_array(bits))
print(f"spikes: {ifmap.nnz}   mean stream length: {ifmap.nnz / ifmap.n_locations:.1f}")
print(f"CSR bytes: {footprint_csr(ifmap)}   AER bytes: {footprint_aer(ifmap)}")

#%%
# The channel indices of one location are the stream the kernel gathers
# weights with.
print("location (0, 0):", ifmap.channels_at(0, 0)[:10], "...")

#%%
# Same layer, both kernels. Outputs are bit-identical; only the cycle
# ledger differs.
w = WeightTensor.from_dense(rng.normal(0, 0.05, (3, 3, 256, 64)).astype(np.float32), simd_width=4)
v = np.zeros((8, 8, 64), np.float32)
runs = {}
for variant in ("baseline", "streamed"):
    desc = ConvLayerDesc(10, 10, 256, 64, lif=LifParams(alpha=0.9), variant=variant)
    runs[variant] = conv_layer(ifmap, w, v, desc, cores=8)

(out_b, v_b, led_b), (out_s, v_s, led_s) = runs["baseline"], runs["streamed"]
assert out_b == out_s and np.array_equal(v_b, v_s)
print(f"output spikes: {out_s.nnz}")
for name, led in (("baseline", led_b), ("streamed", led_s)):
    print(f"{name:9s} cycles {led.elapsed_cycles:7d}   FPU util {utilization(led):.3f}")
print(f"speedup: {led_b.elapsed_cycles / led_s.elapsed_cycles:.2f}x")
