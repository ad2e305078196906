from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ProbePose:
    """Probe tip position in the world frame, mm.

    Orientation is fixed for a whole scan: the end-effector z-axis is world
    -z (into the tissue) and its y-axis the distal scan direction (world +y),
    so its x-axis is world -x.  Image columns run along world +x.
    """

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite pose {self}")

    def moved(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "ProbePose":
        return ProbePose(self.x + dx, self.y + dy, self.z + dz)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


def ee_to_world(dx: float, dy: float, dz: float) -> tuple[float, float, float]:
    """End-effector frame translation to world frame.

    The end-effector frame is right-handed with y = world y (distal) and
    z = -world z (into the tissue), hence x = -world x.
    """
    return -dx, dy, -dz


def world_to_ee(dx: float, dy: float, dz: float) -> tuple[float, float, float]:
    return -dx, dy, -dz
