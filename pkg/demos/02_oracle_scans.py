"""
Visual servoing with a perfect detector
=======================================

Scan the phantom straight and turned by 30 degrees, feeding the controller
ground-truth vessel positions instead of network output.  This shows what the
deadband controller alone does.
"""

from vesselscan.control import ControlConfig
from vesselscan.harness import experiment_suite, plot_offsets
from vesselscan.phantom import PhantomModel

cfg = ControlConfig()
print(f"deadband {cfg.margin_px:g} px = {cfg.margin_mm:.2f} mm, step {cfg.y_step_mm:g} mm")

# no detector given -> ground truth is used
results = experiment_suite(PhantomModel(), cfg, out_dir="oracle_scans")
for r in results:
    print(r.name, r.metrics.summary())

# lateral offset along the scan, with the +-2.74 mm band
plot_offsets(results, "oracle_scans/offsets.png")
print("wrote oracle_scans/")
