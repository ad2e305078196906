"""
Training the two-stage detector
===============================

Render a labelled dataset, cross-validate briefly, train the classifier and
regressor on everything, then scan both scenarios with the trained networks.
Takes several minutes on one core; lower N for a quick look.
"""

import time

from vesselscan.control import ControlConfig
from vesselscan.detector import monte_carlo_cv, train_detector
from vesselscan.harness import experiment_suite, plot_offsets
from vesselscan.phantom import PhantomModel
from vesselscan.renderer import generate_dataset

N = 4000

# 45.9 % positive frames, phantom turned by 0..35 degrees so both scans are covered
t = time.time()
ds = generate_dataset(PhantomModel(), N, seed=0, rotation_range_deg=(0.0, 35.0))
print(f"{len(ds)} frames, {100 * ds.positive_fraction:.1f}% positive, {time.time() - t:.0f} s")

# a short schedule: the classifier is easy, the regressor needs more passes
schedule = dict(epochs=1, regressor_epochs=9, regressor_decay_epochs=3, batch_size=32, lr=3e-3)

# two Monte Carlo folds for a feel of the error (the acceptance suite runs ten)
report = monte_carlo_cv(ds, folds=2, seed=0, **schedule)
print(report.table())

# final networks on all data
detector, summary = train_detector(ds, seed=1, **schedule)
detector.save("detector")
print("classifier loss per epoch", summary.classifier.losses)
print("regressor loss per epoch", summary.regressor.losses)

# closed loop with the networks in it
results = experiment_suite(PhantomModel(), ControlConfig(), detector, out_dir="detector_scans")
for r in results:
    print(r.name, r.metrics.summary())
plot_offsets(results, "detector_scans/offsets.png")
