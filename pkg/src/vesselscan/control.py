"""Translational visual servoing of the probe along the vessel.

Each cycle: keep the contact force at the setpoint, advance distally while a
vessel is detected, and push the probe laterally against the detected
offset once it leaves the insensitivity margin.  A negative detection stops
the scan.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Protocol

import numpy as np

from ._config import ConfigError, coerce_fields, read_keyvalue
from .phantom import PhantomModel, centerline_at, contact_force
from .pose import ProbePose, ee_to_world, world_to_ee
from .renderer import DEFAULT_GEOMETRY, FrameGeometry, GroundTruth, USFrame, render

__all__ = [
    "Command",
    "ContactError",
    "ControlConfig",
    "ControlState",
    "Phase",
    "ProbePose",
    "ScanEntry",
    "ScanLog",
    "StopReason",
    "control_step",
    "detection_from_truth",
    "initial_pose",
    "load_control_config",
    "run_scan",
    "seek_force",
    "x_correction",
]


class Phase(str, enum.Enum):
    SEEK_FORCE = "seek_force"
    SCANNING = "scanning"
    STOPPED = "stopped"


class StopReason(str, enum.Enum):
    NONE = "none"
    VESSEL_LOST = "vessel_lost"
    LENGTH_REACHED = "length_reached"
    CONTACT_LOST = "contact_lost"


class ContactError(RuntimeError):
    """Force seek could not reach the setpoint (probe off the phantom)."""


@dataclass(frozen=True)
class ControlConfig:
    force_target_n: float = 6.0
    force_tolerance_n: float = 0.1
    y_step_mm: float = 2.0
    margin_px: float = 20.0
    spacing_mm: float = 0.137
    max_x_step_mm: float = 2.0
    z_seek_increment_mm: float = 0.2
    scan_length_mm: float = 140.0
    seek_max_iterations: int = 1000
    stop_debounce: int = 1
    frame_rate_hz: float = 3.9
    start_s_mm: float = 0.0
    start_lateral_mm: float = 0.0
    start_height_mm: float = 3.0

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("start_s_mm", "start_lateral_mm", "start_height_mm"):
                continue
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be positive")

    @property
    def margin_mm(self) -> float:
        return self.margin_px * self.spacing_mm


def load_control_config(path: str | os.PathLike, **overrides) -> ControlConfig:
    values = coerce_fields(ControlConfig, read_keyvalue(path))
    values.update(overrides)
    return ControlConfig(**values)


@dataclass(frozen=True)
class ControlState:
    phase: Phase
    pose: ProbePose
    distance_scanned_mm: float = 0.0
    stop_reason: StopReason = StopReason.NONE
    negatives_in_row: int = 0

    @property
    def stopped(self) -> bool:
        return self.phase is Phase.STOPPED


@dataclass(frozen=True)
class Command:
    """Issued motion, end-effector frame (x = -world x, z = -world z)."""

    kind: str  # "move", "hold", "stop" or "none"
    dx_mm: float = 0.0
    dy_mm: float = 0.0
    dz_mm: float = 0.0


class DetectionLike(Protocol):
    vessel_present: bool
    center_mm_offset: float | None


def seek_force(state: ControlState, phantom: PhantomModel, cfg: ControlConfig) -> ControlState:
    """Step the probe along world z until the contact force is within tolerance.

    The end-effector +z is world -z, so "pressing in" lowers pose.z.
    """
    if state.stopped:
        return state
    pose = state.pose
    steps = 0
    for _ in range(cfg.seek_max_iterations):
        probe = replace(pose, z=pose.z - steps * cfg.z_seek_increment_mm)
        force = contact_force(phantom, probe)
        err = force - cfg.force_target_n
        if abs(err) <= cfg.force_tolerance_n:
            return replace(state, phase=Phase.SCANNING, pose=probe)
        steps += 1 if err < 0 else -1
    raise ContactError(
        f"no {cfg.force_target_n} N contact after {cfg.seek_max_iterations} seek steps from {state.pose}"
    )


def x_correction(detection: DetectionLike, cfg: ControlConfig) -> float:
    """Signed lateral command in mm (end-effector x): zero inside the margin, else against the offset, capped.

    Image columns run along world +x, the end-effector x-axis along world -x,
    so commanding against the image offset moves the probe toward the vessel.
    """
    if not detection.vessel_present or detection.center_mm_offset is None:
        raise ValueError("x_correction needs a positive detection")
    offset = detection.center_mm_offset
    if abs(offset) <= cfg.margin_mm:
        return 0.0
    return -math.copysign(min(abs(offset), cfg.max_x_step_mm), offset)


def control_step(
    state: ControlState, detection: DetectionLike, phantom: PhantomModel, cfg: ControlConfig
) -> tuple[ControlState, Command]:
    if state.stopped:
        return state, Command("none")
    if state.phase is not Phase.SCANNING:
        raise ValueError(f"control_step needs the scanning phase, got {state.phase.value}")

    if not detection.vessel_present:
        misses = state.negatives_in_row + 1
        if misses >= cfg.stop_debounce:
            stopped = replace(state, phase=Phase.STOPPED, stop_reason=StopReason.VESSEL_LOST, negatives_in_row=misses)
            return stopped, Command("stop")
        return replace(state, negatives_in_row=misses), Command("hold")

    dx = x_correction(detection, cfg)
    moved = state.pose.moved(*ee_to_world(dx, cfg.y_step_mm, 0.0))
    # distal + lateral translation, then a fresh force seek
    try:
        seeking = replace(state, phase=Phase.SEEK_FORCE, pose=moved, negatives_in_row=0)
        after = seek_force(seeking, phantom, cfg)
    except ContactError:
        stopped = replace(
            state,
            phase=Phase.STOPPED,
            pose=moved,
            distance_scanned_mm=state.distance_scanned_mm + cfg.y_step_mm,
            stop_reason=StopReason.CONTACT_LOST,
            negatives_in_row=0,
        )
        return stopped, Command("move", dx, cfg.y_step_mm, 0.0)

    distance = state.distance_scanned_mm + cfg.y_step_mm
    after = replace(after, distance_scanned_mm=distance)
    if distance >= cfg.scan_length_mm - 1e-9:
        after = replace(after, phase=Phase.STOPPED, stop_reason=StopReason.LENGTH_REACHED)
    dz_ee = world_to_ee(0.0, 0.0, after.pose.z - moved.z)[2]
    return after, Command("move", dx, cfg.y_step_mm, dz_ee)


# ---------------------------------------------------------------------------
# scan loop and log


@dataclass(frozen=True)
class TruthDetection:
    """Detection read straight from the renderer's ground truth."""

    vessel_present: bool
    presence_prob: float
    center_px: tuple[float, float] | None = None
    center_mm_offset: float | None = None


def detection_from_truth(gt: GroundTruth) -> TruthDetection:
    if not gt.vessel_visible:
        return TruthDetection(False, 0.0)
    return TruthDetection(True, 1.0, gt.center_px, gt.center_mm[0])


LOG_COLUMNS = [
    "step",
    "time_ms",
    "pose_x_mm",
    "pose_y_mm",
    "pose_z_mm",
    "force_n",
    "detected",
    "det_center_col_px",
    "det_offset_mm",
    "gt_center_col_px",
    "gt_offset_mm",
    "gt_lumen_fully_visible",
    "cmd_dx_mm",
]


@dataclass(frozen=True)
class ScanEntry:
    step: int
    time_ms: int
    pose_x_mm: float
    pose_y_mm: float
    pose_z_mm: float
    force_n: float
    detected: bool
    det_center_col_px: float
    det_offset_mm: float
    gt_center_col_px: float
    gt_offset_mm: float
    gt_lumen_fully_visible: bool
    cmd_dx_mm: float


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(int(v))


@dataclass
class ScanLog:
    entries: list[ScanEntry] = field(default_factory=list)
    stop_reason: StopReason = StopReason.NONE
    distance_scanned_mm: float = 0.0

    def __len__(self) -> int:
        return len(self.entries)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.entries], dtype=float)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for e in self.entries:
                writer.writerow([_fmt(getattr(e, c)) for c in LOG_COLUMNS])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "ScanLog":
        def num(s: str) -> float:
            return math.nan if s == "" else float(s)

        entries = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                entries.append(
                    ScanEntry(
                        step=int(rec["step"]),
                        time_ms=int(rec["time_ms"]),
                        pose_x_mm=num(rec["pose_x_mm"]),
                        pose_y_mm=num(rec["pose_y_mm"]),
                        pose_z_mm=num(rec["pose_z_mm"]),
                        force_n=num(rec["force_n"]),
                        detected=rec["detected"] == "1",
                        det_center_col_px=num(rec["det_center_col_px"]),
                        det_offset_mm=num(rec["det_offset_mm"]),
                        gt_center_col_px=num(rec["gt_center_col_px"]),
                        gt_offset_mm=num(rec["gt_offset_mm"]),
                        gt_lumen_fully_visible=rec["gt_lumen_fully_visible"] == "1",
                        cmd_dx_mm=num(rec["cmd_dx_mm"]),
                    )
                )
        return cls(entries)


def make_entry(step: int, time_ms: int, pose: ProbePose, force: float, det, gt: GroundTruth, cmd: Command) -> ScanEntry:
    nan = math.nan
    return ScanEntry(
        step=step,
        time_ms=time_ms,
        pose_x_mm=pose.x,
        pose_y_mm=pose.y,
        pose_z_mm=pose.z,
        force_n=force,
        detected=bool(det.vessel_present),
        det_center_col_px=det.center_px[0] if det.vessel_present else nan,
        det_offset_mm=det.center_mm_offset if det.vessel_present else nan,
        gt_center_col_px=gt.center_px[0] if gt.vessel_visible else nan,
        gt_offset_mm=gt.center_mm[0] if gt.vessel_visible else nan,
        gt_lumen_fully_visible=gt.lumen_fully_inside,
        cmd_dx_mm=cmd.dx_mm,
    )


def frame_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def initial_pose(phantom: PhantomModel, cfg: ControlConfig) -> ProbePose:
    """Probe hovering above the vessel at ``start_s_mm`` (stands in for hand-guided placement)."""
    c = centerline_at(phantom, cfg.start_s_mm)
    return ProbePose(c[0] + cfg.start_lateral_mm, c[1], phantom.surface_z_mm + cfg.start_height_mm)


Renderer = Callable[..., tuple[USFrame, GroundTruth]]


def run_scan(
    phantom: PhantomModel,
    cfg: ControlConfig,
    detector=None,
    renderer: Renderer = render,
    seed: int = 0,
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
    pose: ProbePose | None = None,
    max_steps: int | None = None,
    realtime: bool = False,
) -> ScanLog:
    """Closed loop render -> detect -> control_step until the scan stops.

    ``detector`` needs a ``detect(frame)`` method; None substitutes the
    renderer's ground truth (a perfect detector).  Time stamps follow the
    configured frame rate; with ``realtime`` the loop also sleeps to it.
    """
    log = ScanLog()
    state = ControlState(Phase.SEEK_FORCE, pose or initial_pose(phantom, cfg))
    try:
        state = seek_force(state, phantom, cfg)
    except ContactError:
        log.stop_reason = StopReason.CONTACT_LOST
        return log

    period_ms = 1000.0 / cfg.frame_rate_hz
    t0 = time.monotonic()
    step = 0
    while not state.stopped and (max_steps is None or step < max_steps):
        stamp = int(round(step * period_ms))
        if realtime:
            delay = t0 + stamp / 1000.0 - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        frame, gt = renderer(phantom, state.pose, frame_seed(seed, step), geometry, seq=step, timestamp_ms=stamp)
        det = detection_from_truth(gt) if detector is None else detector.detect(frame)
        force = contact_force(phantom, state.pose)
        pose_at_frame = state.pose
        state, cmd = control_step(state, det, phantom, cfg)
        log.entries.append(make_entry(step, stamp, pose_at_frame, force, det, gt, cmd))
        step += 1
    log.stop_reason = state.stop_reason
    log.distance_scanned_mm = state.distance_scanned_mm
    return log
