"""
Depth layers of one toy-world frame
===================================

Render a random scene, split it by depth bin and save a strip of panels.
"""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from hierdiff.layering import layer_bounds, partition
from hierdiff.toyworld import WorldConfig, render_rgbd, reset

world = WorldConfig()
state = reset(np.random.default_rng(4), world)
frame = render_rgbd(state, world)

# bins widen with distance; the last one (table and goal) is not encoded
for N in (1, 2, 3, 6):
    print(N, np.round(layer_bounds(N, world.d_min, world.d_max), 3))

lay = partition(frame, 3)
print("pixels per layer:", [int(l.mask.sum()) for l in lay.layers])

fig, axes = plt.subplots(1, 6, figsize=(12, 2.2))
axes[0].imshow(frame.rgb)
axes[1].imshow(frame.depth, cmap="viridis")
for m, l in enumerate(lay.layers):
    axes[m + 2].imshow(l.rgb)
    axes[m + 2].set_title(f"layer {m}", fontsize=8)
for ax in axes:
    ax.axis("off")
fig.savefig("depth_layers.png", dpi=100)
