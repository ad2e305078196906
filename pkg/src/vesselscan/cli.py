"""Command line entry point: ``vesselscan <command>`` or ``python3 -m vesselscan``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from ._config import ConfigError
from .control import ControlConfig, ScanLog, StopReason, load_control_config, run_scan
from .detector import Detector, monte_carlo_cv, train_detector
from .harness import (
    ExperimentResult,
    SimulatedRobot,
    compute_metrics,
    plot_offsets,
    remote_scan,
    serve_robot,
)
from .neuralnet import ConfigurationError
from .phantom import PhantomModel, load_phantom
from .renderer import generate_dataset, load_dataset, save_dataset
from .stream import FrameClient, StartupError, resolve_port

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3

log = logging.getLogger("vesselscan")


def _phantom(args) -> PhantomModel:
    model = load_phantom(args.phantom) if args.phantom else PhantomModel()
    if getattr(args, "rotation_deg", None) is not None:
        model = model.with_rotation(args.rotation_deg)
    return model


def _control(args) -> ControlConfig:
    return load_control_config(args.control) if args.control else ControlConfig()


def cmd_gen_dataset(args) -> int:
    rot = tuple(args.rotation_range) if args.rotation_range else None
    ds = generate_dataset(_phantom(args), args.n, args.seed, args.neg_fraction, rotation_range_deg=rot)
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames ({100 * ds.positive_fraction:.1f}% positive) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    detector, summary = train_detector(
        ds,
        args.epochs,
        args.batch_size,
        args.seed,
        args.regressor_epochs,
        args.lr,
        args.regressor_decay_epochs,
        not args.no_mirror,
        not args.no_shift,
    )
    cls_path, reg_path = detector.save(args.out)
    print(f"classifier loss {summary.classifier.losses[-1]:.4g} -> {cls_path}")
    print(f"regressor loss {summary.regressor.losses[-1]:.4g} -> {reg_path}")
    return EXIT_OK


def cmd_cv(args) -> int:
    ds = load_dataset(args.data)
    report = monte_carlo_cv(
        ds,
        args.folds,
        args.train_fraction,
        args.seed,
        args.epochs,
        args.batch_size,
        args.regressor_epochs,
        args.lr,
        args.regressor_decay_epochs,
        not args.no_mirror,
        not args.no_shift,
    )
    print(report.table())
    if args.out:
        report.to_csv(args.out)
    return EXIT_OK


def _print_metrics(scan_log: ScanLog, margin_mm: float) -> None:
    m = compute_metrics(scan_log, margin_mm)
    for k, v in m.summary().items():
        print(f"{k:>22}: {v:.4g}" if isinstance(v, float) else f"{k:>22}: {v}")


def cmd_scan(args) -> int:
    phantom, cfg = _phantom(args), _control(args)
    detector = None
    if args.weights:
        detector = Detector.load(args.weights)
    else:
        log.warning("no --weights given: using the ground-truth detector")
    if args.remote:
        host, _, port = args.remote.rpartition(":")
        with FrameClient(host or "127.0.0.1", int(port)) as client:
            scan_log = remote_scan(client, phantom, cfg, detector, max_steps=args.max_steps)
    else:
        scan_log = run_scan(phantom, cfg, detector, seed=args.seed, max_steps=args.max_steps, realtime=args.realtime)
    if args.out:
        scan_log.to_csv(args.out)
    _print_metrics(scan_log, cfg.margin_mm)
    if scan_log.stop_reason in (StopReason.VESSEL_LOST, StopReason.CONTACT_LOST):
        print(f"scan aborted: {scan_log.stop_reason.value} after {scan_log.distance_scanned_mm:g} mm", file=sys.stderr)
        return EXIT_ABORTED
    return EXIT_OK


def cmd_serve(args) -> int:
    phantom, cfg = _phantom(args), _control(args)
    robot = SimulatedRobot(phantom, cfg, seed=args.seed)
    server = serve_robot(robot, args.rate or cfg.frame_rate_hz, resolve_port(args.port), args.host)
    print(f"serving frames on {args.host}:{server.port} at {server.rate_hz:g} Hz", flush=True)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        done.wait(args.duration) if args.duration else done.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _control(args)
    for path in args.logs:
        print(path)
        _print_metrics(ScanLog.from_csv(path), cfg.margin_mm)
    return EXIT_OK


def cmd_plot(args) -> int:
    cfg = _control(args)
    results = []
    for path in args.logs:
        scan_log = ScanLog.from_csv(path)
        label = args.labels[len(results)] if args.labels else Path(path).stem
        results.append(ExperimentResult(float("nan"), scan_log, compute_metrics(scan_log, cfg.margin_mm), label))
    plot_offsets(results, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselscan", description="Simulated ultrasound vessel scanning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scene(sp, rotation=True):
        sp.add_argument("--phantom", help="phantom config file (key = value)")
        if rotation:
            sp.add_argument("--rotation-deg", type=float, help="override the phantom rotation about z")

    def training(sp):
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--epochs", type=int, default=100)
        sp.add_argument("--regressor-epochs", type=int, help="default: --epochs")
        sp.add_argument("--regressor-decay-epochs", type=int, default=0, help="final regressor epochs at lr / 10")
        sp.add_argument("--no-mirror", action="store_true", help="no left-right mirroring of regressor batches")
        sp.add_argument("--no-shift", action="store_true", help="no sideways shifting of regressor batches")
        sp.add_argument("--batch-size", type=int, default=64)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("gen-dataset", help="render a labelled frame dataset")
    scene(sp, rotation=False)
    sp.add_argument("--n", type=int, default=4000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--neg-fraction", type=float, default=0.541)
    sp.add_argument("--rotation-range", type=float, nargs=2, metavar=("LO", "HI"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_dataset)

    sp = sub.add_parser("train", help="train the classifier and regressor")
    training(sp)
    sp.add_argument("--out", required=True, help="weight file prefix")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("cv", help="Monte Carlo cross-validation")
    training(sp)
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--train-fraction", type=float, default=0.8)
    sp.add_argument("--out", help="CSV report path")
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("scan", help="run one robotic scan")
    scene(sp)
    sp.add_argument("--weights", help="detector weight prefix; omitted: ground-truth detector")
    sp.add_argument("--remote", metavar="HOST:PORT", help="drive a robot served by `vesselscan serve`")
    sp.add_argument("--control", help="control config file (key = value)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--realtime", action="store_true", help="pace the in-process loop at the frame rate")
    sp.add_argument("--out", help="scan log CSV")
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("serve", help="serve frames from a simulated robot")
    scene(sp)
    sp.add_argument("--control", help="control config file (key = value)")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, help="default: $VESSELSCAN_PORT or 5577")
    sp.add_argument("--rate", type=float, help="frames per second (default: control frame_rate_hz)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--duration", type=float, help="stop after this many seconds")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("evaluate", help="tracking metrics of scan logs")
    sp.add_argument("logs", nargs="+")
    sp.add_argument("--control", help="control config file (for the margin)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot", help="plot lateral offset along the scan")
    sp.add_argument("logs", nargs="+")
    sp.add_argument("--labels", nargs="+")
    sp.add_argument("--control", help="control config file (for the margin)")
    sp.add_argument("--out", required=True, help=".png or .svg")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, StartupError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
