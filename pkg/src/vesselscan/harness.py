"""Scan experiments: metrics, the 0/30 degree suite, plots and the networked robot.

``SimulatedRobot`` is the server side of a remote scan: it renders frames at
the current probe pose and executes move commands (with a force seek after
each).  ``remote_scan`` is the matching client loop.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .control import (
    ContactError,
    ControlConfig,
    ControlState,
    Phase,
    ScanLog,
    StopReason,
    control_step,
    detection_from_truth,
    frame_seed,
    initial_pose,
    make_entry,
    run_scan,
    seek_force,
)
from .phantom import DomainError, PhantomModel, contact_force
from .pose import ProbePose, ee_to_world
from .renderer import DEFAULT_GEOMETRY, FrameGeometry, USFrame, ground_truth, render
from .stream import CommandKind, CommandMessage, FrameClient, FrameServer

log = logging.getLogger(__name__)

# Tracking band drawn on offset plots (mm).
TRACKING_BAND_MM = 2.74
SUITE_ROTATIONS = (0.0, 30.0)


@dataclass(frozen=True)
class ScanMetrics:
    frames: int
    pct_full_lumen_visible: float
    distance_series: np.ndarray  # (frames, 2): step, |ground-truth offset| in mm (NaN when not visible)
    mae_mm: float
    max_mm: float
    margin_mm: float
    distance_scanned_mm: float
    stop_reason: StopReason

    def summary(self) -> dict:
        return {
            "frames": self.frames,
            "pct_full_lumen_visible": self.pct_full_lumen_visible,
            "mae_mm": self.mae_mm,
            "max_mm": self.max_mm,
            "margin_mm": self.margin_mm,
            "distance_scanned_mm": self.distance_scanned_mm,
            "stop_reason": self.stop_reason.value,
        }


def compute_metrics(log: ScanLog, margin_mm: float = float("nan")) -> ScanMetrics:
    """Tracking statistics of a scan log; offsets use ground truth, NaNs skipped."""
    if not len(log):
        raise DomainError("cannot compute metrics of an empty scan log")
    full = log.column("gt_lumen_fully_visible")
    off = np.abs(log.column("gt_offset_mm"))
    finite = np.isfinite(off)
    return ScanMetrics(
        frames=len(log),
        pct_full_lumen_visible=100.0 * float(full.mean()),
        distance_series=np.column_stack([log.column("step"), off]),
        mae_mm=float(off[finite].mean()) if finite.any() else math.nan,
        max_mm=float(off[finite].max()) if finite.any() else math.nan,
        margin_mm=margin_mm,
        distance_scanned_mm=log.distance_scanned_mm,
        stop_reason=log.stop_reason,
    )


@dataclass
class ExperimentResult:
    rotation_deg: float
    log: ScanLog
    metrics: ScanMetrics
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or f"{self.rotation_deg:g} deg"


def experiment_suite(
    phantom: PhantomModel,
    cfg: ControlConfig,
    detector=None,
    rotations=SUITE_ROTATIONS,
    seed: int = 0,
    out_dir: str | os.PathLike | None = None,
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
) -> list[ExperimentResult]:
    """Scan the phantom once per rotation; optionally write logs and a summary CSV.

    Every scenario uses the same seed and config, so only the rotation differs.
    """
    results = []
    for rot in rotations:
        scan_log = run_scan(phantom.with_rotation(rot), cfg, detector, seed=seed, geometry=geometry)
        results.append(ExperimentResult(rot, scan_log, compute_metrics(scan_log, cfg.margin_mm)))
        log.info("rotation %.0f deg: %s", rot, results[-1].metrics.summary())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            r.log.to_csv(out / f"scan_{r.rotation_deg:g}deg.csv")
        write_summary(results, out / "summary.csv")
    return results


def write_summary(results: list[ExperimentResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        keys = list(results[0].metrics.summary()) if results else []
        w.writerow(["rotation_deg", *keys])
        for r in results:
            w.writerow([r.rotation_deg, *r.metrics.summary().values()])


def plot_offsets(results: list[ExperimentResult], path: str | os.PathLike, band_mm: float = TRACKING_BAND_MM) -> None:
    """Signed ground-truth offset against probe travel, one trace per rotation; PNG or SVG by suffix."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3.5))
    for r in results:
        y = r.log.column("pose_y_mm")
        travelled = np.r_[0.0, np.cumsum(np.hypot(np.diff(r.log.column("pose_x_mm")), np.diff(y)))]
        ax.plot(travelled, r.log.column("gt_offset_mm"), label=f"{r.name} (MAE {r.metrics.mae_mm:.2f} mm)")
    ax.axhspan(-band_mm, band_mm, color="0.85", zorder=0, label=f"+/-{band_mm} mm")
    if results and math.isfinite(results[0].metrics.margin_mm):
        mm = results[0].metrics.margin_mm
        for v in (-mm, mm):
            ax.axhline(v, color="0.5", lw=0.8, ls="--")
    ax.set_xlabel("distance scanned (mm)")
    ax.set_ylabel("lateral vessel offset (mm)")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# networked robot


class SimulatedRobot:
    """Probe on a simulated arm: renders at its pose and executes commands."""

    def __init__(
        self,
        phantom: PhantomModel,
        cfg: ControlConfig,
        pose: ProbePose | None = None,
        seed: int = 0,
        geometry: FrameGeometry = DEFAULT_GEOMETRY,
    ):
        self.phantom = phantom
        self.cfg = cfg
        self.geometry = geometry
        self.seed = seed
        self.state = seek_force(ControlState(Phase.SEEK_FORCE, pose or initial_pose(phantom, cfg)), phantom, cfg)
        self.server: FrameServer | None = None
        self.frames_rendered = 0
        self.stopped = False
        self._lock = threading.RLock()

    @property
    def pose(self) -> ProbePose:
        return self.state.pose

    def next_frame(self) -> USFrame:
        with self._lock:
            k = self.frames_rendered
            self.frames_rendered += 1
            stamp = int(round(k * 1000.0 / self.cfg.frame_rate_hz))
            frame, _ = render(self.phantom, self.pose, frame_seed(self.seed, k), self.geometry, seq=k, timestamp_ms=stamp)
        return frame

    def _status(self, seq: int) -> CommandMessage:
        p = self.pose
        return CommandMessage(CommandKind.STATUS, seq, *(int(round(v * 1000.0)) for v in p.as_tuple()))

    def handle(self, msg: CommandMessage) -> CommandMessage | None:
        lock = self.server.lock if self.server is not None else self._lock
        with lock, self._lock:
            if msg.kind is CommandKind.MOVE_DELTA and not self.stopped:
                moved = self.pose.moved(*ee_to_world(*msg.delta_mm))
                try:
                    self.state = seek_force(replace(self.state, phase=Phase.SEEK_FORCE, pose=moved), self.phantom, self.cfg)
                except ContactError:
                    log.warning("contact lost at %s; robot stopped", moved)
                    self.state = replace(self.state, pose=moved)
                    self.stopped = True
                if self.server is not None:
                    self.server.invalidate()
            elif msg.kind is CommandKind.STOP:
                self.stopped = True
            elif msg.kind is not CommandKind.STATUS_REQUEST:
                return None
            return self._status(msg.seq)


def serve_robot(robot: SimulatedRobot, rate_hz: float | None = None, port: int = 0, host: str = "127.0.0.1") -> FrameServer:
    server = FrameServer(robot.next_frame, rate_hz or robot.cfg.frame_rate_hz, host, port, robot.handle)
    robot.server = server
    return server.start()


def _pose_from_status(msg: CommandMessage) -> ProbePose:
    return ProbePose(msg.dx_um / 1000.0, msg.dy_um / 1000.0, msg.dz_um / 1000.0)


def remote_scan(
    client: FrameClient,
    phantom: PhantomModel,
    cfg: ControlConfig,
    detector=None,
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
    max_steps: int | None = None,
    frame_timeout_s: float = 5.0,
) -> ScanLog:
    """Closed loop over the network: newest frame -> detect -> move command.

    Ground truth for the log comes from the local phantom copy at the pose the
    robot reports; a None detector uses that ground truth as the detection.
    """
    scan_log = ScanLog()
    status = client.request(CommandMessage(CommandKind.STATUS_REQUEST, client.next_seq()))
    state = ControlState(Phase.SCANNING, _pose_from_status(status))
    after = client.last_reply_frame_seq
    step = 0
    while not state.stopped and (max_steps is None or step < max_steps):
        frame = client.latest_frame(after, frame_timeout_s)
        if frame.geometry != geometry:
            raise ValueError(f"server frames are {frame.geometry}, expected {geometry}")
        gt = ground_truth(phantom, state.pose, geometry)
        det = detection_from_truth(gt) if detector is None else detector.detect(frame)
        force = contact_force(phantom, state.pose)
        pose_at_frame = state.pose
        new_state, cmd = control_step(state, det, phantom, cfg)
        if cmd.kind == "move":
            reply = client.request(CommandMessage.move_delta(client.next_seq(), cmd.dx_mm, cmd.dy_mm, 0.0))
            new_state = replace(new_state, pose=_pose_from_status(reply))
            after = client.last_reply_frame_seq
        elif cmd.kind == "stop":
            client.request(CommandMessage(CommandKind.STOP, client.next_seq()))
            after = frame.seq
        else:
            after = frame.seq
        scan_log.entries.append(make_entry(step, int(frame.timestamp_ms), pose_at_frame, force, det, gt, cmd))
        state = new_state
        step += 1
    scan_log.stop_reason = state.stop_reason
    scan_log.distance_scanned_mm = state.distance_scanned_mm
    return scan_log
