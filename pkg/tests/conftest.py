import time

import pytest

from vesselscan.detector import train_detector
from vesselscan.phantom import PhantomModel
from vesselscan.renderer import generate_dataset

# Shared synthetic dataset: 45.9 % positive frames, phantom turned by 0..35 degrees
# so one detector serves both scan scenarios.
DATASET = dict(n=4000, seed=0, neg_fraction=0.541, rotation_range_deg=(0.0, 35.0))

# Budget training schedule (a full 100-epoch run does not fit the CV time limit on one core).
TRAINING = dict(epochs=1, regressor_epochs=9, regressor_decay_epochs=3, batch_size=32, lr=3e-3)

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def synthetic_dataset():
    return generate_dataset(PhantomModel(), **DATASET)


@pytest.fixture(scope="session")
def trained_detector(synthetic_dataset):
    started = time.monotonic()
    detector, _ = train_detector(synthetic_dataset, seed=1, **TRAINING)
    detector.training_seconds = time.monotonic() - started
    return detector


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)
