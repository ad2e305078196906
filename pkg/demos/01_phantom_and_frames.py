"""
Phantom and B-mode frames
=========================

Render a few frames along the default leg phantom and save them as a PNG.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from vesselscan.phantom import PhantomModel, centerline_at
from vesselscan.pose import ProbePose
from vesselscan.renderer import render

# the default phantom: a vessel 20 mm deep that wanders 5 mm left and right
phantom = PhantomModel()
print(phantom)

# put the probe above the centreline at a few points and press 12 mm into the skin
fig, axes = plt.subplots(2, 2, figsize=(10, 6))
for ax, s in zip(axes.flat, (20.0, 60.0, 100.0, 140.0)):
    c = centerline_at(phantom, s)
    pose = ProbePose(c[0] - 3.0, c[1], -12.0)  # 3 mm to the left of the vessel
    frame, truth = render(phantom, pose, seed=int(s))
    ax.imshow(frame.pixels, cmap="gray", aspect="auto")
    col, row = truth.center_px
    ax.plot(col, row, "g+", ms=14)
    ax.set_title(f"s = {s:g} mm, offset {truth.offset_mm:+.2f} mm")

# the lumen is dark, the tissue around it is speckle
plt.tight_layout()
plt.savefig("frames.png", dpi=80)
print("wrote frames.png")
