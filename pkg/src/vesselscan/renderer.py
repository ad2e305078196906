"""Synthetic B-mode frames of the phantom and labelled datasets built from them.

Frames are 8-bit, rows = depth below the probe face, columns = lateral
position along the probe x-axis.  Column ``(cols - 1) / 2`` is the image
centre line; row ``r`` sits at depth ``r * spacing_mm``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ._config import read_keyvalue, write_keyvalue
from .pose import ProbePose
from .phantom import PhantomModel, centerline_at, vessel_cross_section


@dataclass(frozen=True)
class FrameGeometry:
    rows: int = 277
    cols: int = 512
    spacing_mm: float = 0.137

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("frame dimensions must be positive")
        if not self.spacing_mm > 0:
            raise ValueError("spacing_mm must be positive")

    @property
    def center_col(self) -> float:
        return (self.cols - 1) / 2.0

    @property
    def width_mm(self) -> float:
        return self.cols * self.spacing_mm

    def mm_to_px(self, lateral_mm: float, depth_mm: float) -> tuple[float, float]:
        """Image-plane mm to sub-pixel (col, row)."""
        return lateral_mm / self.spacing_mm + self.center_col, depth_mm / self.spacing_mm

    def px_to_mm(self, col: float, row: float) -> tuple[float, float]:
        return (col - self.center_col) * self.spacing_mm, row * self.spacing_mm


DEFAULT_GEOMETRY = FrameGeometry()


@dataclass
class USFrame:
    pixels: np.ndarray
    spacing_mm: float = DEFAULT_GEOMETRY.spacing_mm
    seq: int = 0
    timestamp_ms: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be a 2D uint8 array")
        if not self.spacing_mm > 0:
            raise ValueError("spacing_mm must be positive")

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]

    @property
    def geometry(self) -> FrameGeometry:
        return FrameGeometry(self.rows, self.cols, self.spacing_mm)


@dataclass(frozen=True)
class GroundTruth:
    vessel_visible: bool
    center_px: tuple[float, float] | None = None
    lumen_fully_inside: bool = False
    center_mm: tuple[float, float] | None = None
    radius_px: float | None = None

    def __post_init__(self):
        if self.vessel_visible != (self.center_px is not None):
            raise ValueError("center_px must be present iff the vessel is visible")
        if self.lumen_fully_inside and not self.vessel_visible:
            raise ValueError("a fully visible lumen implies a visible vessel")

    @property
    def offset_mm(self) -> float | None:
        return None if self.center_mm is None else self.center_mm[0]


# Appearance constants (intensities before 8-bit clipping).
_TISSUE_LEVEL = 110.0
_ATTENUATION_PER_MM = 0.02
_SKIN_BAND_MM = 0.7
_SKIN_GAIN = 2.4
_FASCIA_DEPTH_MM = 15.0
_FASCIA_BAND_MM = 0.4
_FASCIA_GAIN = 1.6
_LUMEN_GAIN = 0.08
_WALL_MM = 0.6
_WALL_GAIN = 2.0
_ENHANCEMENT_GAIN = 1.25


def _speckle(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    # Magnitude of a smoothed complex Gaussian field: Rayleigh-distributed,
    # spatially correlated grain, normalised to unit mean.
    field = gaussian_filter(rng.standard_normal((2,) + shape, dtype=np.float32), sigma=(0.0, 0.8, 1.6), truncate=3.0)
    mag = np.hypot(field[0], field[1])
    return mag / mag.mean()


def ground_truth(phantom: PhantomModel, pose: ProbePose, geometry: FrameGeometry = DEFAULT_GEOMETRY) -> GroundTruth:
    cs = vessel_cross_section(phantom, pose)
    h = phantom.surface_height(pose.x, pose.y)
    if cs is None or math.isnan(h):
        return GroundTruth(False)
    skin_depth = max(0.0, pose.z - h)
    col, row = geometry.mm_to_px(cs.lateral_mm, cs.depth_mm)
    lo_c, hi_c = -0.5, geometry.cols - 0.5
    lo_r, hi_r = -0.5, geometry.rows - 0.5
    inside = lo_c <= col <= hi_c and lo_r <= row <= hi_r and cs.depth_mm > skin_depth
    if not inside:
        return GroundTruth(False)
    a = cs.radius_mm / geometry.spacing_mm
    b = cs.depth_radius_mm / geometry.spacing_mm
    full = (
        col - a >= lo_c
        and col + a <= hi_c
        and row - b >= max(lo_r, skin_depth / geometry.spacing_mm)
        and row + b <= hi_r
    )
    return GroundTruth(True, (col, row), bool(full), (cs.lateral_mm, cs.depth_mm), a)


def render(
    phantom: PhantomModel,
    pose: ProbePose,
    seed: int,
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
    seq: int = 0,
    timestamp_ms: int = 0,
) -> tuple[USFrame, GroundTruth]:
    """Render one B-mode frame; deterministic in (phantom, pose, seed)."""
    rng = np.random.default_rng(seed)
    sp = geometry.spacing_mm
    depth = (np.arange(geometry.rows) * sp)[:, None]
    lateral = ((np.arange(geometry.cols) - geometry.center_col) * sp)[None, :]

    img = np.zeros((geometry.rows, geometry.cols))
    h = phantom.surface_height(pose.x, pose.y)
    if not math.isnan(h):
        skin = max(0.0, pose.z - h)
        below = depth - skin
        tissue = np.where(below >= 0.0, _TISSUE_LEVEL * np.exp(-_ATTENUATION_PER_MM * np.clip(below, 0, None)), 0.0)
        gain = np.ones_like(below)
        gain[(below >= 0) & (below < _SKIN_BAND_MM)] = _SKIN_GAIN
        fascia = pose.z - h + _FASCIA_DEPTH_MM
        gain[(depth >= fascia) & (depth < fascia + _FASCIA_BAND_MM)] = _FASCIA_GAIN
        img = np.broadcast_to(tissue * gain, img.shape).copy()

        cs = vessel_cross_section(phantom, pose)
        if cs is not None:
            du = (lateral - cs.lateral_mm) / cs.radius_mm
            dd = (depth - cs.depth_mm) / cs.depth_radius_mm
            rho = np.sqrt(du * du + dd * dd)
            wall = 1.0 + _WALL_MM / cs.depth_radius_mm
            shadow_cols = np.abs(du) <= 1.0
            img *= np.where(shadow_cols & (depth > cs.depth_mm) & (rho > wall), _ENHANCEMENT_GAIN, 1.0)
            img[(rho > 1.0) & (rho <= wall)] *= _WALL_GAIN
            img[rho <= 1.0] *= _LUMEN_GAIN

    img *= _speckle(rng, img.shape)
    img += 2.0 + 1.5 * rng.standard_normal(img.shape, dtype=np.float32)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    frame = USFrame(pixels, sp, seq, timestamp_ms)
    return frame, ground_truth(phantom, pose, geometry)


def downsample(pixels: np.ndarray, out_shape: tuple[int, int] = (70, 128)) -> np.ndarray:
    """Block-average (..., rows, cols) uint8 frames to float32 in [0, 1].

    The frame is zero-padded at the bottom/right to a whole number of blocks.
    """
    rows, cols = pixels.shape[-2:]
    orow, ocol = out_shape
    fr, fc = math.ceil(rows / orow), math.ceil(cols / ocol)
    lead = pixels.shape[:-2]
    padded = np.zeros(lead + (orow * fr, ocol * fc), dtype=np.float32)
    r, c = min(rows, orow * fr), min(cols, ocol * fc)
    padded[..., :r, :c] = pixels[..., :r, :c]
    blocks = padded.reshape(lead + (orow, fr, ocol, fc))
    return blocks.mean(axis=(-3, -1)) * np.float32(1.0 / 255.0)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Labelled frames: ``labels`` 1 = vessel visible; ``centers_px`` (col, row), NaN for negatives."""

    images: np.ndarray
    labels: np.ndarray
    centers_px: np.ndarray
    geometry: FrameGeometry = DEFAULT_GEOMETRY
    poses: list[ProbePose] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.labels)
        if self.images.shape != (n, self.geometry.rows, self.geometry.cols):
            raise ValueError("image stack does not match labels/geometry")
        if self.centers_px.shape != (n, 2):
            raise ValueError("centers_px must be (n, 2)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        poses = [self.poses[i] for i in idx] if self.poses else []
        return Dataset(self.images[idx], self.labels[idx], self.centers_px[idx], self.geometry, poses)

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.labels == 1))


def _positive_pose(phantom, rng, geometry):
    s = rng.uniform(5.0, phantom.length_mm - 5.0)
    c = centerline_at(phantom, s)
    half = geometry.width_mm / 2.0 - 6.0
    if rng.random() < 0.5:
        u = float(np.clip(rng.normal(0.0, 4.0), -half, half))
    else:
        u = rng.uniform(-half, half)
    indentation = rng.uniform(6.0, 16.0)
    return ProbePose(c[0] - u, c[1], phantom.surface_z_mm - indentation)


def _negative_pose(phantom, rng, geometry):
    indentation = rng.uniform(6.0, 16.0)
    z = phantom.surface_z_mm - indentation
    mode = rng.integers(3)
    if mode == 0:
        # vessel lateral to the field of view
        s = rng.uniform(5.0, phantom.length_mm - 5.0)
        c = centerline_at(phantom, s)
        u = rng.choice([-1.0, 1.0]) * rng.uniform(geometry.width_mm / 2.0 + 5.0, geometry.width_mm / 2.0 + 25.0)
        return ProbePose(c[0] - u, c[1], z)
    # imaging plane past either end of the vessel
    end = phantom.length_mm if mode == 1 else 0.0
    c = centerline_at(phantom, end)
    dy = rng.uniform(3.0, 15.0) * (1.0 if mode == 1 else -1.0)
    return ProbePose(c[0] + rng.uniform(-10.0, 10.0), c[1] + dy, z)


def generate_dataset(
    phantom: PhantomModel,
    n: int,
    seed: int,
    neg_fraction: float = 0.541,
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
    rotation_range_deg: tuple[float, float] | None = None,
) -> Dataset:
    """Render ``n`` frames from randomised poses, ``round(n * neg_fraction)`` of them negative.

    With ``rotation_range_deg`` each sample uses the phantom turned by a
    uniform random angle from that range, so one dataset covers several scan
    scenarios.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 <= neg_fraction <= 1.0:
        raise ValueError("neg_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_neg = int(round(n * neg_fraction))
    labels = rng.permutation(np.r_[np.zeros(n_neg, np.int8), np.ones(n - n_neg, np.int8)])
    images = np.empty((n, geometry.rows, geometry.cols), np.uint8)
    centers = np.full((n, 2), np.nan)
    poses = []
    for i, label in enumerate(labels):
        model = phantom
        if rotation_range_deg is not None:
            model = phantom.with_rotation(rng.uniform(*rotation_range_deg))
        while True:
            pose = (_positive_pose if label else _negative_pose)(model, rng, geometry)
            frame, gt = render(model, pose, int(rng.integers(2**31)), geometry)
            if gt.vessel_visible == bool(label):
                break
        images[i] = frame.pixels
        if label:
            centers[i] = gt.center_px
        poses.append(pose)
    return Dataset(images, labels, centers, geometry, poses)


MANIFEST = "manifest.csv"
GEOMETRY_FILE = "geometry.txt"


def save_dataset(dataset: Dataset, directory: str | os.PathLike) -> Path:
    """One raw row-major u8 file per frame plus ``manifest.csv``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    g = dataset.geometry
    write_keyvalue(out / GEOMETRY_FILE, {"rows": g.rows, "cols": g.cols, "spacing_mm": g.spacing_mm})
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "center_col_px", "center_row_px"])
        for i in range(len(dataset)):
            name = f"frame_{i:06d}.raw"
            (out / name).write_bytes(np.ascontiguousarray(dataset.images[i]).tobytes())
            if dataset.labels[i]:
                col, row = dataset.centers_px[i]
                writer.writerow([name, 1, repr(float(col)), repr(float(row))])
            else:
                writer.writerow([name, 0, "", ""])
    return out


def load_dataset(directory: str | os.PathLike, geometry: FrameGeometry | None = None) -> Dataset:
    src = Path(directory)
    if geometry is None:
        if (src / GEOMETRY_FILE).exists():
            kv = read_keyvalue(src / GEOMETRY_FILE)
            geometry = FrameGeometry(int(kv["rows"]), int(kv["cols"]), float(kv["spacing_mm"]))
        else:
            geometry = DEFAULT_GEOMETRY
    with open(src / MANIFEST, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = len(rows)
    images = np.empty((n, geometry.rows, geometry.cols), np.uint8)
    labels = np.empty(n, np.int8)
    centers = np.full((n, 2), np.nan)
    for i, rec in enumerate(rows):
        buf = np.fromfile(src / rec["filename"], dtype=np.uint8)
        if buf.size != geometry.rows * geometry.cols:
            raise ValueError(f"{rec['filename']}: expected {geometry.rows * geometry.cols} bytes, got {buf.size}")
        images[i] = buf.reshape(geometry.rows, geometry.cols)
        labels[i] = int(rec["label"])
        if labels[i]:
            centers[i] = float(rec["center_col_px"]), float(rec["center_row_px"])
    return Dataset(images, labels, centers, geometry)
