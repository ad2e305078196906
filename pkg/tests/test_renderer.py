import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselscan import renderer
from vesselscan.phantom import PhantomModel, centerline_at
from vesselscan.pose import ProbePose
from vesselscan.renderer import (
    DEFAULT_GEOMETRY,
    FrameGeometry,
    GroundTruth,
    USFrame,
    downsample,
    generate_dataset,
    ground_truth,
    load_dataset,
    render,
    save_dataset,
)

STRAIGHT = PhantomModel(centerline="straight")
SINE = PhantomModel()


def _above(model, s, lateral=0.0, z=-10.0):
    c = centerline_at(model, s)
    return ProbePose(c[0] - lateral, c[1], z)


def test_centered_vessel():
    frame, gt = render(STRAIGHT, _above(STRAIGHT, 80.0), seed=1)
    assert frame.pixels.shape == (277, 512) and frame.pixels.dtype == np.uint8
    assert gt.vessel_visible and gt.lumen_fully_inside
    assert gt.center_px[0] == pytest.approx(255.5)
    assert gt.center_px[1] == pytest.approx(10.0 / 0.137)


def test_lumen_edge_outside_frame():
    half = DEFAULT_GEOMETRY.width_mm / 2
    _, gt = render(STRAIGHT, _above(STRAIGHT, 80.0, lateral=half - 1.0), seed=1)
    assert gt.vessel_visible and not gt.lumen_fully_inside


def test_deterministic_per_seed():
    pose = _above(SINE, 60.0, 2.0)
    a, ga = render(SINE, pose, seed=9)
    b, gb = render(SINE, pose, seed=9)
    c, _ = render(SINE, pose, seed=10)
    assert np.array_equal(a.pixels, b.pixels) and ga == gb
    assert not np.array_equal(a.pixels, c.pixels)


def _lumen_and_background(frame, gt):
    g = frame.geometry
    cols, rows = np.meshgrid(np.arange(g.cols), np.arange(g.rows))
    r = gt.radius_px
    rb = 3.0 / g.spacing_mm
    rho2 = ((cols - gt.center_px[0]) / r) ** 2 + ((rows - gt.center_px[1]) / rb) ** 2
    inside = rho2 <= 0.8
    tissue = (rows > 10) & (rho2 > 4.0)  # clear of the skin band and the vessel wall
    return frame.pixels[inside].mean(), frame.pixels[tissue].mean()


def test_lumen_contrast_over_random_renders():
    rng = np.random.default_rng(0)
    for i in range(100):
        model = SINE.with_rotation(float(rng.uniform(0, 35)))
        pose = _above(model, float(rng.uniform(10, 190)), float(rng.uniform(-20, 20)), float(rng.uniform(-16, -6)))
        frame, gt = render(model, pose, seed=i)
        assert gt.vessel_visible
        lumen, background = _lumen_and_background(frame, gt)
        assert lumen < background
        assert lumen <= 0.3 * background


def test_skin_line_bright():
    frame, _ = render(STRAIGHT, _above(STRAIGHT, 80.0, z=0.0), seed=2)
    assert frame.pixels[:5].mean() > 1.5 * frame.pixels[20:60].mean()


@settings(max_examples=200)
@given(st.floats(-30, 30), st.floats(0.5, 30))
def test_mm_px_round_trip(lateral, depth):
    g = DEFAULT_GEOMETRY
    col, row = g.mm_to_px(lateral, depth)
    back = g.px_to_mm(col, row)
    assert abs(back[0] - lateral) <= g.spacing_mm / 2 and abs(back[1] - depth) <= g.spacing_mm / 2


def test_ground_truth_invariants():
    with pytest.raises(ValueError):
        GroundTruth(True)
    with pytest.raises(ValueError):
        GroundTruth(False, lumen_fully_inside=True)


def test_no_vessel_off_phantom():
    frame, gt = render(STRAIGHT, ProbePose(0.0, 400.0, -5.0), seed=0)
    assert not gt.vessel_visible
    assert frame.pixels.mean() < 10


def test_frame_validation():
    with pytest.raises(ValueError):
        USFrame(np.zeros((3, 3), np.float32))
    with pytest.raises(ValueError):
        USFrame(np.zeros((3, 3), np.uint8), spacing_mm=0.0)


def test_downsample():
    px = np.full((277, 512), 255, np.uint8)
    out = downsample(px)
    assert out.shape == (70, 128) and out.dtype == np.float32
    assert out[0, 0] == pytest.approx(1.0)
    # rows 277..279 are zero padding in the last block row
    assert out[-1, 0] == pytest.approx(1.0 / 4.0)
    stack = downsample(np.stack([px, px // 2]))
    assert stack.shape == (2, 70, 128)


def test_geometry_center():
    assert DEFAULT_GEOMETRY.center_col == 255.5
    assert 20 * DEFAULT_GEOMETRY.spacing_mm == pytest.approx(2.74)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(SINE, 60, seed=4, rotation_range_deg=(0.0, 35.0))


def test_dataset_balance_and_labels(small_dataset):
    ds = small_dataset
    assert (ds.labels == 0).sum() == round(60 * 0.541)
    for i in range(len(ds)):
        if ds.labels[i]:
            assert np.all(np.isfinite(ds.centers_px[i]))
            assert ds.centers_px[i][1] >= 1.0
        else:
            assert np.all(np.isnan(ds.centers_px[i]))


def test_positive_centres_below_skin():
    ds = generate_dataset(STRAIGHT, 40, seed=2, neg_fraction=0.0)
    for pose, c in zip(ds.poses, ds.centers_px):
        skin_row = max(0.0, pose.z - STRAIGHT.surface_z_mm) / ds.geometry.spacing_mm
        assert c[1] >= skin_row + 1.0


def test_all_positive():
    ds = generate_dataset(SINE, 10, seed=0, neg_fraction=0.0)
    assert ds.labels.all() and np.isfinite(ds.centers_px).all()


def test_dataset_deterministic():
    a = generate_dataset(SINE, 30, seed=5)
    b = generate_dataset(SINE, 30, seed=5)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.images, b.images)


def test_paper_class_balance(monkeypatch):
    # full-size dataset with a pixel-free renderer: labels and annotations only
    blank = np.zeros((277, 512), np.uint8)
    monkeypatch.setattr(renderer, "render", lambda m, p, seed, g=DEFAULT_GEOMETRY: (USFrame(blank), ground_truth(m, p, g)))
    ds = generate_dataset(SINE, 8314, seed=0, neg_fraction=0.541)
    assert abs(ds.positive_fraction - 0.459) <= 0.01
    assert np.isfinite(ds.centers_px[ds.labels == 1]).all()


def test_dataset_disk_round_trip(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert np.array_equal(back.images, small_dataset.images)
    assert np.array_equal(back.labels, small_dataset.labels)
    assert np.array_equal(back.centers_px, small_dataset.centers_px, equal_nan=True)
    lines = (tmp_path / "ds" / "manifest.csv").read_text().splitlines()
    assert lines[0] == "filename,label,center_col_px,center_row_px"
    neg = next(line for line in lines[1:] if ",0," in line)
    assert neg.endswith(",0,,")
    assert (tmp_path / "ds" / "frame_000000.raw").stat().st_size == 277 * 512


def test_load_rejects_wrong_size(small_dataset, tmp_path):
    save_dataset(small_dataset.subset([0, 1]), tmp_path / "ds")
    (tmp_path / "ds" / "frame_000001.raw").write_bytes(b"\0" * 10)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "ds")


def test_custom_geometry():
    g = FrameGeometry(100, 200, 0.3)
    frame, gt = render(STRAIGHT, _above(STRAIGHT, 50.0), seed=0, geometry=g)
    assert frame.pixels.shape == (100, 200)
    assert gt.center_px[0] == pytest.approx(99.5)


def test_generate_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_dataset(SINE, 0, seed=0)
    with pytest.raises(ValueError):
        generate_dataset(SINE, 5, seed=0, neg_fraction=1.5)
