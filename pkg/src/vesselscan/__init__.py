"""Desk-scale robotic ultrasound vessel scanning in simulation.

A parametric leg phantom and a B-mode renderer stand in for the hardware; a
numpy CNN pair (presence classifier, centre regressor) feeds a deadband
visual-servoing loop; frames and robot commands can travel over a small
binary TCP protocol.
"""

from .control import ControlConfig, ScanLog, run_scan
from .detector import Detection, Detector, monte_carlo_cv, train_detector
from .harness import compute_metrics, experiment_suite
from .phantom import PhantomModel
from .pose import ProbePose
from .renderer import DEFAULT_GEOMETRY, USFrame, generate_dataset, render

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_GEOMETRY",
    "ControlConfig",
    "Detection",
    "Detector",
    "PhantomModel",
    "ProbePose",
    "ScanLog",
    "USFrame",
    "compute_metrics",
    "experiment_suite",
    "generate_dataset",
    "monte_carlo_cv",
    "render",
    "run_scan",
    "train_detector",
]
