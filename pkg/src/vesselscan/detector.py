"""Two-stage vessel detection: a presence classifier gates a centre regressor."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .neuralnet import ConfigurationError, Network
from .renderer import DEFAULT_GEOMETRY, Dataset, FrameGeometry, USFrame, downsample

log = logging.getLogger(__name__)

INPUT_SHAPE = (70, 128)


@dataclass(frozen=True)
class Detection:
    vessel_present: bool
    presence_prob: float
    center_px: tuple[float, float] | None = None
    center_mm_offset: float | None = None

    def __post_init__(self):
        if self.vessel_present != (self.center_px is not None) or self.vessel_present != (
            self.center_mm_offset is not None
        ):
            raise ValueError("centre fields must be present iff a vessel is present")


def normalize_centers(centers_px: np.ndarray, geometry: FrameGeometry) -> np.ndarray:
    """(col, row) pixels to fractions of the frame extent, pixel centres at (i + 0.5) / n."""
    c = np.asarray(centers_px, dtype=np.float64)
    return np.stack([(c[..., 0] + 0.5) / geometry.cols, (c[..., 1] + 0.5) / geometry.rows], axis=-1)


def denormalize_centers(norm: np.ndarray, geometry: FrameGeometry) -> np.ndarray:
    n = np.asarray(norm, dtype=np.float64)
    return np.stack([n[..., 0] * geometry.cols - 0.5, n[..., 1] * geometry.rows - 0.5], axis=-1)


def network_inputs(images: np.ndarray, shape=INPUT_SHAPE, chunk: int = 512) -> np.ndarray:
    """Stack of uint8 frames to (n, H, W, 1) float32 network inputs."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    out = np.empty((len(images),) + tuple(shape) + (1,), nn.DTYPE)
    for a in range(0, len(images), chunk):
        out[a : a + chunk, ..., 0] = downsample(images[a : a + chunk], shape)
    return out


class Detector:
    """Hierarchical pipeline; ``regressor_calls`` counts frames sent to the regressor.

    With ``mirror_average`` the regressor also sees each frame flipped
    left-right and the two estimates are averaged.  The valid convolutions and
    floor pooling leave the right edge of the input with less coverage than
    the left, so a vessel near one edge gets its better estimate from the flip.
    """

    def __init__(
        self,
        classifier: Network,
        regressor: Network,
        geometry: FrameGeometry = DEFAULT_GEOMETRY,
        threshold: float = 0.5,
        mirror_average: bool = True,
    ):
        if classifier.loss != "cross_entropy" or classifier.output_shape != (2,):
            raise ConfigurationError("classifier must end in a 2-way softmax")
        if regressor.loss != "mse" or regressor.output_shape != (2,):
            raise ConfigurationError("regressor must end in a 2-unit linear output")
        if classifier.input_shape != regressor.input_shape:
            raise ConfigurationError("classifier and regressor disagree on input shape")
        self.classifier = classifier
        self.regressor = regressor
        self.geometry = geometry
        self.threshold = threshold
        self.mirror_average = mirror_average
        self.regressor_calls = 0

    @property
    def input_hw(self) -> tuple[int, int]:
        return self.classifier.input_shape[:2]

    def _check(self, rows: int, cols: int, spacing_mm: float) -> None:
        g = self.geometry
        if (rows, cols) != (g.rows, g.cols) or not math.isclose(spacing_mm, g.spacing_mm, rel_tol=1e-9):
            raise ConfigurationError(
                f"frame geometry {rows}x{cols}@{spacing_mm} mm does not match detector {g.rows}x{g.cols}@{g.spacing_mm} mm"
            )

    def locate(self, x: np.ndarray) -> np.ndarray:
        """Normalised (col, row) centres for network inputs that hold a vessel."""
        centers = self.regressor.predict(x).astype(np.float64)
        if self.mirror_average:
            flipped = self.regressor.predict(x[:, :, ::-1]).astype(np.float64)
            flipped[:, 0] = 1.0 - flipped[:, 0]
            centers = (centers + flipped) / 2.0
        return centers

    def detect(self, frame: USFrame) -> Detection:
        return self.detect_many(frame.pixels[None], frame.spacing_mm)[0]

    def detect_many(self, images: np.ndarray, spacing_mm: float | None = None) -> list[Detection]:
        images = np.asarray(images)
        self._check(images.shape[1], images.shape[2], self.geometry.spacing_mm if spacing_mm is None else spacing_mm)
        x = network_inputs(images, self.input_hw)
        prob = self.classifier.predict(x)[:, 1].astype(float)
        positive = prob >= self.threshold
        centers = np.full((len(x), 2), np.nan)
        if positive.any():
            self.regressor_calls += int(positive.sum())
            centers[positive] = denormalize_centers(self.locate(x[positive]), self.geometry)
        out = []
        for p, pos, c in zip(prob, positive, centers):
            if pos:
                col, row = float(c[0]), float(c[1])
                offset = (col - self.geometry.center_col) * self.geometry.spacing_mm
                out.append(Detection(True, float(p), (col, row), offset))
            else:
                out.append(Detection(False, float(p)))
        return out

    def save(self, prefix: str | os.PathLike) -> tuple[str, str]:
        cls_path, reg_path = f"{prefix}.classifier.bin", f"{prefix}.regressor.bin"
        nn.save_weights(self.classifier, cls_path)
        nn.save_weights(self.regressor, reg_path)
        return cls_path, reg_path

    @classmethod
    def load(
        cls,
        prefix: str | os.PathLike,
        geometry: FrameGeometry = DEFAULT_GEOMETRY,
        threshold: float = 0.5,
        mirror_average: bool = True,
    ) -> "Detector":
        return cls(
            nn.load_weights(f"{prefix}.classifier.bin"),
            nn.load_weights(f"{prefix}.regressor.bin"),
            geometry,
            threshold,
            mirror_average,
        )


def mirror_batch(x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Flip about half the frames left-right; normalised centre columns become 1 - col."""
    flip = rng.random(len(x)) < 0.5
    if not flip.any():
        return x, y
    x, y = x.copy(), y.copy()
    x[flip] = x[flip, :, ::-1]
    y[flip, 0] = 1.0 - y[flip, 0]
    return x, y


def lateral_shift(
    x: np.ndarray, y: np.ndarray, rng: np.random.Generator, lo: float, hi: float
) -> tuple[np.ndarray, np.ndarray]:
    """Roll about half the frames sideways by whole input columns.

    Shifts are drawn so the normalised centre column stays in [lo, hi].  The
    strip that wraps round is background as long as the lumen stays in view.
    """
    x, y = x.copy(), y.copy()
    w = x.shape[2]
    for i in np.flatnonzero(rng.random(len(x)) < 0.5):
        first, last = math.ceil((lo - y[i, 0]) * w), math.floor((hi - y[i, 0]) * w)
        if last < first:
            continue
        k = int(rng.integers(first, last + 1))
        x[i] = np.roll(x[i], k, axis=1)
        y[i, 0] += k / w
    return x, y


def one_hot(labels: np.ndarray) -> np.ndarray:
    return np.eye(2, dtype=nn.DTYPE)[np.asarray(labels, dtype=int)]


@dataclass
class TrainingSummary:
    classifier: nn.TrainReport
    regressor: nn.TrainReport


def train_networks(
    inputs: np.ndarray,
    labels: np.ndarray,
    centers_px: np.ndarray,
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
    epochs: int = 100,
    batch_size: int = 64,
    seed: int = 0,
    regressor_epochs: int | None = None,
    lr: float = 1e-3,
    regressor_decay_epochs: int = 0,
    mirror: bool = True,
    shift: bool = True,
) -> tuple[Detector, TrainingSummary]:
    """Fresh classifier on all samples, fresh regressor on the positives.

    Regressor batches are augmented by left-right mirroring (``mirror``) and
    by sideways shifts that keep the centre in view (``shift``).  The last ``regressor_decay_epochs`` epochs run at lr / 10.
    """
    labels = np.asarray(labels)
    hw = inputs.shape[1:3]
    rng = np.random.default_rng(seed)
    s_cls, s_reg, s_tc, s_tr = (int(v) for v in rng.integers(0, 2**31, 4))
    classifier = nn.build_classifier(hw + (1,), seed=s_cls)
    regressor = nn.build_regressor(hw + (1,), seed=s_reg)
    rep_c = nn.train(classifier, inputs, one_hot(labels), epochs, batch_size, s_tc, lr)
    pos = np.flatnonzero(labels == 1)
    if len(pos) == 0:
        raise ValueError("no positive samples to train the regressor")
    targets = normalize_centers(centers_px[pos], geometry).astype(nn.DTYPE)
    # shifted centres may go halfway from the outermost training centre to the
    # frame edge, so the extremes of the data are not the edge of the support
    lo, hi = float(targets[:, 0].min()) / 2.0, (1.0 + float(targets[:, 0].max())) / 2.0

    def augment(xb, yb, rng):
        if mirror:
            xb, yb = mirror_batch(xb, yb, rng)
        if shift:
            xb, yb = lateral_shift(xb, yb, rng, lo, hi)
        return xb, yb

    rep_r = nn.train(
        regressor,
        inputs[pos],
        targets,
        epochs if regressor_epochs is None else regressor_epochs,
        batch_size,
        s_tr,
        lr,
        decay_epochs=regressor_decay_epochs,
        augment=augment if mirror or shift else None,
    )
    return Detector(classifier, regressor, geometry), TrainingSummary(rep_c, rep_r)


def train_detector(
    dataset: Dataset,
    epochs: int = 100,
    batch_size: int = 64,
    seed: int = 0,
    regressor_epochs: int | None = None,
    lr: float = 1e-3,
    regressor_decay_epochs: int = 0,
    mirror: bool = True,
    shift: bool = True,
) -> tuple[Detector, TrainingSummary]:
    return train_networks(
        network_inputs(dataset.images),
        dataset.labels,
        dataset.centers_px,
        dataset.geometry,
        epochs,
        batch_size,
        seed,
        regressor_epochs,
        lr,
        regressor_decay_epochs,
        mirror,
        shift,
    )


# ---------------------------------------------------------------------------
# Monte Carlo cross-validation


@dataclass
class FoldResult:
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    accuracy: float
    abs_err_x_mm: np.ndarray
    abs_err_y_mm: np.ndarray
    resamples: int = 0

    @property
    def mae_x_mm(self) -> float:
        return float(self.abs_err_x_mm.mean())

    @property
    def mae_y_mm(self) -> float:
        return float(self.abs_err_y_mm.mean())

    @property
    def max_x_mm(self) -> float:
        return float(self.abs_err_x_mm.max())

    @property
    def max_y_mm(self) -> float:
        return float(self.abs_err_y_mm.max())


CSV_COLUMNS = [
    "fold",
    "accuracy",
    "accuracy_pct",
    "accuracy_std",
    "accuracy_std_pct",
    "mae_x_mm",
    "mae_x_std_mm",
    "mae_y_mm",
    "mae_y_std_mm",
    "max_x_mm",
    "max_y_mm",
]


@dataclass
class CVReport:
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    @property
    def accuracy_mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def accuracy_std(self) -> float:
        return float(self.accuracies.std())

    def _pooled(self, axis: str) -> np.ndarray:
        return np.concatenate([getattr(f, f"abs_err_{axis}_mm") for f in self.folds])

    @property
    def mae_x_mm(self) -> float:
        return float(self._pooled("x").mean())

    @property
    def mae_x_std_mm(self) -> float:
        return float(self._pooled("x").std())

    @property
    def mae_y_mm(self) -> float:
        return float(self._pooled("y").mean())

    @property
    def mae_y_std_mm(self) -> float:
        return float(self._pooled("y").std())

    @property
    def max_x_mm(self) -> float:
        return float(self._pooled("x").max())

    @property
    def max_y_mm(self) -> float:
        return float(self._pooled("y").max())

    def rows(self) -> list[dict]:
        out = []
        for f in self.folds:
            out.append(
                {
                    "fold": f.fold,
                    "accuracy": f.accuracy,
                    "accuracy_pct": 100.0 * f.accuracy,
                    "accuracy_std": "",
                    "accuracy_std_pct": "",
                    "mae_x_mm": f.mae_x_mm,
                    "mae_x_std_mm": float(f.abs_err_x_mm.std()),
                    "mae_y_mm": f.mae_y_mm,
                    "mae_y_std_mm": float(f.abs_err_y_mm.std()),
                    "max_x_mm": f.max_x_mm,
                    "max_y_mm": f.max_y_mm,
                }
            )
        out.append(
            {
                "fold": "summary",
                "accuracy": self.accuracy_mean,
                "accuracy_pct": 100.0 * self.accuracy_mean,
                "accuracy_std": self.accuracy_std,
                "accuracy_std_pct": 100.0 * self.accuracy_std,
                "mae_x_mm": self.mae_x_mm,
                "mae_x_std_mm": self.mae_x_std_mm,
                "mae_y_mm": self.mae_y_mm,
                "mae_y_std_mm": self.mae_y_std_mm,
                "max_x_mm": self.max_x_mm,
                "max_y_mm": self.max_y_mm,
            }
        )
        return out

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows())

    def table(self) -> str:
        return "\n".join(
            [
                f"Classification accuracy [%]   mu +- sigma   {100 * self.accuracy_mean:.2f} +- {100 * self.accuracy_std:.2f}"
                f"  (fraction {self.accuracy_mean:.4f} +- {self.accuracy_std:.4f})",
                f"Vessel detection MAE [mm]     mu_x +- sigma_x  {self.mae_x_mm:.2f} +- {self.mae_x_std_mm:.2f}",
                f"                              mu_y +- sigma_y  {self.mae_y_mm:.2f} +- {self.mae_y_std_mm:.2f}",
                f"                              max_x            {self.max_x_mm:.2f}",
                f"                              max_y            {self.max_y_mm:.2f}",
            ]
        )


def split_indices(n: int, train_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_test = int(round(n * (1.0 - train_fraction)))
    if not 0 < n_test < n:
        raise ValueError(f"train_fraction {train_fraction} leaves no train or no test samples for n={n}")
    perm = rng.permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def fold_split(labels: np.ndarray, fold: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Random split for one fold, redrawn until the test set holds both classes."""
    rng = np.random.default_rng([seed, fold])
    for attempt in range(1000):
        train_idx, test_idx = split_indices(len(labels), train_fraction, rng)
        if len(np.unique(labels[test_idx])) == 2:
            return train_idx, test_idx, attempt
        log.warning("fold %d: single-class test split, resampling (attempt %d)", fold, attempt + 1)
    raise ValueError("could not draw a test split containing both classes")


def evaluate_fold(
    detector: Detector, inputs: np.ndarray, dataset: Dataset, test_idx: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    labels = dataset.labels[test_idx]
    prob = detector.classifier.predict(inputs[test_idx])[:, 1]
    accuracy = float(np.mean((prob >= detector.threshold) == (labels == 1)))
    pos = test_idx[labels == 1]
    pred = denormalize_centers(detector.locate(inputs[pos]), dataset.geometry)
    err = np.abs(pred - dataset.centers_px[pos]) * dataset.geometry.spacing_mm
    return accuracy, err[:, 0], err[:, 1]


def monte_carlo_cv(
    dataset: Dataset,
    folds: int = 10,
    train_fraction: float = 0.8,
    seed: int = 0,
    epochs: int = 100,
    batch_size: int = 64,
    regressor_epochs: int | None = None,
    lr: float = 1e-3,
    regressor_decay_epochs: int = 0,
    mirror: bool = True,
    shift: bool = True,
) -> CVReport:
    """Repeated random train/test resampling; fresh networks every fold.

    Fold ``i`` draws its split and initial weights from ``(seed, i)`` only,
    so results do not depend on the order folds are run in.
    """
    if folds < 2:
        raise ValueError("need at least two folds")
    if len(np.unique(dataset.labels)) != 2:
        raise ValueError("dataset must contain both classes")
    inputs = network_inputs(dataset.images)
    report = CVReport()
    for fold in range(folds):
        train_idx, test_idx, resamples = fold_split(dataset.labels, fold, train_fraction, seed)
        fold_seed = int(np.random.default_rng([seed, fold, 1]).integers(2**31))
        detector, _ = train_networks(
            inputs[train_idx],
            dataset.labels[train_idx],
            dataset.centers_px[train_idx],
            dataset.geometry,
            epochs,
            batch_size,
            fold_seed,
            regressor_epochs,
            lr,
            regressor_decay_epochs,
            mirror,
            shift,
        )
        acc, ex, ey = evaluate_fold(detector, inputs, dataset, test_idx)
        report.folds.append(FoldResult(fold, train_idx, test_idx, acc, ex, ey, resamples))
        log.info("fold %d: accuracy %.4f mae_x %.3f mm mae_y %.3f mm", fold, acc, ex.mean(), ey.mean())
    return report
