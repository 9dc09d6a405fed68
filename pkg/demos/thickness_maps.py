"""Layer thickness and fluid maps of a phantom with the ETDRS grid on top.

Run with ``python demos/thickness_maps.py [out.png]``.  Needs matplotlib
(``pip install -e .[demos]``).
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from octquant.phantom import Ellipsoid, PhantomSpec, generate
from octquant.thickness import etdrs_summarize, layer_thickness_map, pathology_map

out = sys.argv[1] if len(sys.argv) > 1 else "thickness_maps.png"

spec = PhantomSpec(
    dims=(32, 256, 200),
    fluids=[Ellipsoid(center_um=(3000.0, 330.0, 3400.0), semi_axes_um=(900.0, 40.0, 700.0), host="ONL+IS")],
    seed=11,
)
_, mask, truth = generate(spec)

maps = [
    layer_thickness_map(mask, "RNFL"),
    layer_thickness_map(mask, "ONL+IS"),
    pathology_map(mask, "Fluid"),
]

fig, axes = plt.subplots(1, len(maps), figsize=(4.2 * len(maps), 4.0))
for ax, tmap in zip(axes, maps):
    im = ax.imshow(tmap.values, extent=(0, 6, 6, 0), cmap="viridis")
    for r in (0.5, 1.5, 2.5):
        ax.add_patch(plt.Circle((3, 3), r, fill=False, color="w", lw=0.8))
    for a in (45, 135):
        t = np.deg2rad(a)
        ax.plot([3 + 0.5 * np.cos(t), 3 + 2.5 * np.cos(t)], [3 + 0.5 * np.sin(t), 3 + 2.5 * np.sin(t)], "w", lw=0.8)
        ax.plot([3 - 0.5 * np.cos(t), 3 - 2.5 * np.cos(t)], [3 - 0.5 * np.sin(t), 3 - 2.5 * np.sin(t)], "w", lw=0.8)
    ax.set_title(f"{tmap.name} ({tmap.units})")
    ax.set_xlabel("x (mm)")
    fig.colorbar(im, ax=ax, shrink=0.8)
axes[0].set_ylabel("y (mm)")
fig.tight_layout()
fig.savefig(out, dpi=120)
print(f"wrote {out}")

for tmap in maps:
    s = etdrs_summarize(tmap)
    cells = "  ".join(f"{k}={'-' if v is None else f'{v:.4g}'}" for k, v in s.sectors.items())
    print(f"{tmap.name:>7} [{s.aggregation}] {cells}")
