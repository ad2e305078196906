"""
Scanning over the wire
======================

Serve frames from a simulated robot on a local port and drive it from a
client, the way the controller would talk to real hardware.
"""

from vesselscan.control import ControlConfig
from vesselscan.harness import SimulatedRobot, compute_metrics, remote_scan, serve_robot
from vesselscan.phantom import PhantomModel
from vesselscan.stream import FrameClient

phantom = PhantomModel().with_rotation(30.0)
cfg = ControlConfig()

# the robot renders a frame at its current pose every 1/3.9 s
robot = SimulatedRobot(phantom, cfg, seed=0)
server = serve_robot(robot, rate_hz=20.0)  # faster than real time for the demo
print("serving on port", server.port)

# the client side sees only frames and status replies
with FrameClient("127.0.0.1", server.port) as client:
    log = remote_scan(client, phantom, cfg)
server.stop()

print(len(log), "frames,", log.stop_reason.value)
print(compute_metrics(log, cfg.margin_mm).summary())
print("frames produced", server.frames_produced, "sent", server.frames_sent)
