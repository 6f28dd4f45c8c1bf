"""Simulate a desk-scale weld and look at its eleven descriptors.

The pool travels along x, so grains in the fusion zone should be long in
x and short in y, and much larger than the fine base metal.

    python demos/weld_descriptor_tour.py
"""

import numpy as np

from microcal import descriptors, lattice

params = lattice.WeldParams(velocity=15, haz=60, pool_width=80, seed=3)
ms, history = lattice.run_weld(params, history=True)
print(f"{ms.width}x{ms.length} weld, {descriptors.label_components(ms)[1]} grains")
print(f"base metal mean grain area {descriptors.mean_filtered_area(history.initial):.1f} sites")

bands = descriptors.BandConfig(band_width=12, band_spacing=8, num_bands=5)
samples = descriptors.compute_descriptors(ms, descriptors.ALL_DESCRIPTORS,
                                          descriptors.FilterConfig(20), bands)
for s in samples:
    name = descriptors.DESCRIPTOR_NAMES[s.descriptor_id]
    print(f"d{s.descriptor_id:<2d} {name:15s} n={s.count:5d}  mean={np.mean(s.samples):8.2f}")

# a coarse picture of the centre of the plate
step = 4
rows = slice(ms.length // 2 - 60, ms.length // 2 + 60, step)
sub = ms.spins[rows, ::step]
chars = " .:-=+*#%@"
print("\n".join("".join(chars[v % len(chars)] for v in row) for row in sub))
