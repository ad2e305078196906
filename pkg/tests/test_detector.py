import csv
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselscan import neuralnet as nn
from vesselscan.detector import (
    CSV_COLUMNS,
    Detection,
    Detector,
    denormalize_centers,
    fold_split,
    lateral_shift,
    mirror_batch,
    monte_carlo_cv,
    network_inputs,
    normalize_centers,
)
from vesselscan.neuralnet import ConfigurationError
from vesselscan.renderer import DEFAULT_GEOMETRY, Dataset, FrameGeometry, USFrame

G = DEFAULT_GEOMETRY
FRAMES = np.random.default_rng(0).integers(0, 256, (12, 277, 512), dtype=np.uint8)


def rigged(prob_positive, center_col=255.5, center_row=100.0):
    """Networks whose outputs ignore the image: zero final weights, chosen biases."""
    cls = nn.build_classifier(seed=0)
    cls.params[-2][0][:] = 0.0
    cls.params[-2][1][:] = [math.log(1.0 - prob_positive), math.log(prob_positive)]
    reg = nn.build_regressor(seed=0)
    reg.params[-2][0][:] = 0.0
    reg.params[-2][1][:] = normalize_centers(np.array([center_col, center_row]), G)
    return Detector(cls, reg, mirror_average=False)


def test_low_presence_skips_regressor():
    det = rigged(0.02)
    d = det.detect(USFrame(FRAMES[0]))
    assert not d.vessel_present and d.center_px is None and d.center_mm_offset is None
    assert d.presence_prob == pytest.approx(0.02, abs=1e-6)
    assert det.regressor_calls == 0


def test_margin_column_offset():
    det = rigged(0.9, center_col=275.5)
    d = det.detect(USFrame(FRAMES[0]))
    assert d.vessel_present and det.regressor_calls == 1
    assert d.center_px[0] == pytest.approx(275.5, abs=1e-4)
    assert d.center_mm_offset == pytest.approx(2.74, abs=1e-4)


def test_detection_fields_consistent():
    with pytest.raises(ValueError):
        Detection(True, 0.9)
    with pytest.raises(ValueError):
        Detection(False, 0.1, (1.0, 2.0), 0.0)


def test_geometry_mismatch():
    det = rigged(0.9)
    with pytest.raises(ConfigurationError):
        det.detect(USFrame(FRAMES[0][:200]))
    with pytest.raises(ConfigurationError):
        det.detect(USFrame(FRAMES[0], spacing_mm=0.2))


def test_mismatched_networks():
    with pytest.raises(ConfigurationError):
        Detector(nn.build_regressor(seed=0), nn.build_regressor(seed=0))
    with pytest.raises(ConfigurationError):
        Detector(nn.build_classifier((36, 38, 1)), nn.build_regressor(seed=0))


@pytest.fixture(scope="module")
def random_detector():
    # untrained nets with a shifted final bias so both outcomes occur
    det = Detector(nn.build_classifier(seed=3), nn.build_regressor(seed=4))
    prob = det.classifier.predict(network_inputs(FRAMES))[:, 1]
    det.classifier.params[-2][1][1] -= math.log(np.median(prob) / (1 - np.median(prob)))
    return det


def test_hierarchy_counts_positives(random_detector):
    det = random_detector
    det.regressor_calls = 0
    out = det.detect_many(FRAMES)
    positives = sum(d.vessel_present for d in out)
    assert 0 < positives < len(FRAMES)
    assert det.regressor_calls == positives
    for d in out:
        assert d.vessel_present == (d.presence_prob >= det.threshold)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_threshold_monotone(random_detector, a, b):
    lo, hi = sorted((a, b))
    det = random_detector
    counts = []
    for t in (lo, hi):
        det.threshold = t
        counts.append(sum(d.vessel_present for d in det.detect_many(FRAMES[:6])))
    det.threshold = 0.5
    assert counts[1] <= counts[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_offset_matches_column(random_detector, seed):
    det = random_detector
    det.threshold = 0.0
    pixels = np.random.default_rng(seed).integers(0, 256, (277, 512), dtype=np.uint8)
    d = det.detect(USFrame(pixels))
    det.threshold = 0.5
    assert abs(d.center_mm_offset - (d.center_px[0] - 255.5) * G.spacing_mm) <= 1e-6


def test_mirror_average_of_constant_is_centre():
    det = rigged(0.9, center_col=400.0)
    det.mirror_average = True
    assert det.detect(USFrame(FRAMES[0])).center_px[0] == pytest.approx(255.5, abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mirror_average_is_equivariant(random_detector, seed):
    det = random_detector
    det.threshold = 0.0
    pixels = np.random.default_rng(seed).integers(0, 256, (277, 512), dtype=np.uint8)
    a, b = det.detect(USFrame(pixels)), det.detect(USFrame(pixels[:, ::-1].copy()))
    det.threshold = 0.5
    assert b.center_px[0] == pytest.approx(G.cols - 1 - a.center_px[0], abs=1e-3)
    assert b.center_px[1] == pytest.approx(a.center_px[1], abs=1e-3)
    assert b.center_mm_offset == pytest.approx(-a.center_mm_offset, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 0.5), st.floats(0.5, 0.8))
def test_lateral_shift(seed, lo, hi):
    rng = np.random.default_rng(seed)
    x = rng.random((8, 3, 16, 1)).astype(np.float32)
    y = np.c_[rng.uniform(lo, hi, 8), rng.random(8)].astype(np.float32)
    x0, y0 = x.copy(), y.copy()
    sx, sy = lateral_shift(x, y, np.random.default_rng(seed), lo, hi)
    assert np.array_equal(x, x0) and np.array_equal(y, y0)
    assert np.array_equal(sy[:, 1], y[:, 1])
    k = np.round((sy[:, 0] - y[:, 0]) * 16).astype(int)
    assert np.allclose(sy[:, 0], y[:, 0] + k / 16, atol=1e-6)
    assert np.all((sy[:, 0] >= lo - 1e-6) & (sy[:, 0] <= hi + 1e-6))
    for i in range(8):
        assert np.array_equal(sx[i], np.roll(x[i], k[i], axis=1))


@given(st.floats(-50, 600), st.floats(-50, 300))
def test_normalisation_round_trip(col, row):
    back = denormalize_centers(normalize_centers(np.array([col, row]), G), G)
    assert np.allclose(back, [col, row], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mirror_batch(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((8, 5, 7, 1)).astype(np.float32)
    y = rng.random((8, 2)).astype(np.float32)
    x0, y0 = x.copy(), y.copy()
    mx, my = mirror_batch(x, y, np.random.default_rng(seed))
    assert np.array_equal(x, x0) and np.array_equal(y, y0)
    for i in range(len(x)):
        if np.array_equal(mx[i], x[i]):
            assert my[i, 0] == y[i, 0]
        else:
            assert np.array_equal(mx[i], x[i, :, ::-1]) and np.isclose(my[i, 0], 1.0 - y[i, 0])
    assert np.array_equal(my[:, 1], y[:, 1])


def test_save_load(tmp_path):
    det = rigged(0.7, 300.0)
    det.save(tmp_path / "det")
    back = Detector.load(tmp_path / "det", mirror_average=False)
    a, b = det.detect(USFrame(FRAMES[1])), back.detect(USFrame(FRAMES[1]))
    assert a == b


def _tiny_dataset(labels, seed=0):
    labels = np.asarray(labels)
    n = len(labels)
    g = FrameGeometry(28, 32, 1.0)
    rng = np.random.default_rng(seed)
    centers = np.where(labels[:, None] == 1, rng.uniform(5, 20, (n, 2)), np.nan)
    images = rng.integers(0, 256, (n, 28, 32), dtype=np.uint8)
    return Dataset(images, labels, centers, g)


def test_cv_ten_samples_two_folds(tmp_path):
    ds = _tiny_dataset([0, 1] * 5)
    report = monte_carlo_cv(ds, folds=2, seed=1, epochs=1, batch_size=4)
    assert len(report.folds) == 2
    assert all(len(f.test_idx) == 2 and len(f.train_idx) == 8 for f in report.folds)
    report.to_csv(tmp_path / "cv.csv")
    with open(tmp_path / "cv.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_COLUMNS
    assert [r["fold"] for r in rows] == ["0", "1", "summary"]
    assert float(rows[-1]["accuracy"]) == pytest.approx(report.accuracy_mean)
    assert float(rows[-1]["accuracy_pct"]) == pytest.approx(100 * report.accuracy_mean)
    assert "+-" in report.table()


def test_cv_splits_deterministic_and_resampled():
    labels = np.array([0, 1] * 20)
    a = [fold_split(labels, f, 0.8, 7) for f in range(5)]
    b = [fold_split(labels, f, 0.8, 7) for f in reversed(range(5))][::-1]
    for (tra, tea, _), (trb, teb, _) in zip(a, b):
        assert np.array_equal(tra, trb) and np.array_equal(tea, teb)
        assert len(np.intersect1d(tra, tea)) == 0 and len(tra) + len(tea) == 40
    # random resampling rather than a partition: test sets may overlap
    tests = [set(t) for _, t, _ in a]
    assert any(tests[i] & tests[j] for i in range(5) for j in range(i + 1, 5))


def test_single_class_split_is_redrawn(caplog):
    labels = np.array([1] + [0] * 19)
    with caplog.at_level(logging.WARNING, logger="vesselscan.detector"):
        results = [fold_split(labels, f, 0.8, 0) for f in range(6)]
    for _, test, _ in results:
        assert len(np.unique(labels[test])) == 2
    assert sum(r for _, _, r in results) > 0
    assert "resampling" in caplog.text


def test_cv_rejects_bad_input():
    with pytest.raises(ValueError):
        monte_carlo_cv(_tiny_dataset([0, 1] * 5), folds=1)
    with pytest.raises(ValueError):
        monte_carlo_cv(_tiny_dataset([1] * 10), folds=2)
