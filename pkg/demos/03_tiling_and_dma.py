"""
Tiling and the double-buffered timeline
=======================================

Force small tiles on a few layers, check that the outputs do not change,
and read off how DMA windows hide behind compute.
"""

import dataclasses

from spikestream import bundled_config_path, load_config, plan_tiles, run_network

cfg = load_config(bundled_config_path()).select(2, 4)
tiled_layers = tuple(dataclasses.replace(l, tile_rows=4, weight_groups=4) for l in cfg.layers)
tiled = cfg.replace(layers=tiled_layers)

for p in plan_tiles(tiled).layers:
    print(f"{p.name}: {len(p.row_tiles)} row tiles x {len(p.weight_tiles)} weight tiles, "
          f"{p.live_bytes} of {p.capacity} SPM bytes live")

a, b = run_network(cfg), run_network(tiled)
assert all(x == y for x, y in zip(a.outputs[0], b.outputs[0]))
print("tiled outputs identical to untiled")

#%%
# elapsed = prologue + sum(max(compute_i, dma_window_i)) + epilogue
led = b.ledgers[0]
body = sum(max(p.compute, p.dma) for p in led.passes)
print(f"{led.layer}: {led.prologue} + {body} + {led.epilogue} = {led.elapsed_cycles}")
hidden = sum(min(p.compute, p.dma) for p in led.passes)
print(f"DMA cycles hidden behind compute: {hidden} of {led.dma_cycles}")
