"""Simulated leg phantom: one vessel tube under a flat skin surface.

World frame: z points up, the skin plane sits at ``surface_z_mm`` and the
vessel runs at a fixed depth below it.  In the phantom's own (unrotated)
frame the vessel advances along +y with an optional sinusoidal lateral
wander in x.  ``rotation_z_deg`` turns the whole phantom about the world
z-axis through the vessel start point (s = 0).
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy.optimize import brentq

from ._config import ConfigError, coerce_fields, read_keyvalue, write_keyvalue

if TYPE_CHECKING:
    from .pose import ProbePose

CENTERLINE_KINDS = ("straight", "sine")

# Tissue extends this far beyond both vessel ends along the phantom axis.
_SKIRT_MM = 20.0


class DomainError(ValueError):
    """Argument outside the domain of a phantom query."""


@dataclass(frozen=True)
class CrossSection:
    """Lumen cut by the imaging plane, in probe-image millimetres.

    ``lateral_mm`` is the signed offset of the lumen centre along the probe
    x-axis, ``depth_mm`` its distance below the probe face.  ``radius_mm`` is
    the lateral semi-axis of the cut ellipse, ``depth_radius_mm`` the axial one.
    """

    lateral_mm: float
    depth_mm: float
    radius_mm: float
    depth_radius_mm: float
    s_mm: float


@dataclass(frozen=True)
class PhantomModel:
    centerline: str = "sine"
    amplitude_mm: float = 5.0
    period_mm: float = 160.0
    length_mm: float = 200.0
    depth_mm: float = 20.0
    lumen_radius_mm: float = 3.0
    surface_z_mm: float = 0.0
    stiffness_n_per_mm: float = 0.5
    rotation_z_deg: float = 0.0
    origin_x_mm: float = 0.0
    origin_y_mm: float = 0.0
    half_width_mm: float = 50.0
    max_lateral_mm: float = 15.0

    def __post_init__(self):
        if self.centerline not in CENTERLINE_KINDS:
            raise ConfigError(f"centerline must be one of {CENTERLINE_KINDS}, got {self.centerline!r}")
        if not self.length_mm > 0:
            raise ConfigError("length_mm must be positive")
        if not self.lumen_radius_mm > 0:
            raise ConfigError("lumen_radius_mm must be positive")
        if not self.depth_mm > self.lumen_radius_mm + 1.0:
            raise ConfigError("vessel must lie at least 1 mm below the skin (depth_mm > lumen_radius_mm + 1)")
        if not self.stiffness_n_per_mm > 0:
            raise ConfigError("stiffness_n_per_mm must be positive")
        if self.centerline == "sine":
            if not self.period_mm > 0:
                raise ConfigError("period_mm must be positive")
            if abs(self.amplitude_mm) > self.max_lateral_mm:
                raise ConfigError("sinusoid amplitude exceeds max_lateral_mm")

    # -- local (unrotated) geometry ------------------------------------
    def _lateral(self, s):
        if self.centerline == "straight":
            return np.zeros_like(s, dtype=float) if isinstance(s, np.ndarray) else 0.0
        return self.amplitude_mm * np.sin(2.0 * np.pi * s / self.period_mm)

    def _lateral_slope(self, s):
        if self.centerline == "straight":
            return 0.0
        w = 2.0 * np.pi / self.period_mm
        return self.amplitude_mm * w * np.cos(w * s)

    @property
    def pivot(self) -> tuple[float, float]:
        return (self.origin_x_mm + float(self._lateral(0.0)), self.origin_y_mm)

    def _rotate(self, x, y):
        px, py = self.pivot
        th = math.radians(self.rotation_z_deg)
        c, s = math.cos(th), math.sin(th)
        dx, dy = x - px, y - py
        return px + c * dx - s * dy, py + s * dx + c * dy

    def _unrotate(self, x, y):
        px, py = self.pivot
        th = math.radians(self.rotation_z_deg)
        c, s = math.cos(th), math.sin(th)
        dx, dy = x - px, y - py
        return px + c * dx + s * dy, py - s * dx + c * dy

    # -- public queries --------------------------------------------------
    @property
    def vessel_z_mm(self) -> float:
        return self.surface_z_mm - self.depth_mm

    def lumen_radius_at(self, s: float) -> float:
        return self.lumen_radius_mm

    def centerline_at(self, s: float) -> np.ndarray:
        return centerline_at(self, s)

    def surface_height(self, x: float, y: float) -> float:
        """World z of the skin at (x, y); NaN off the phantom footprint."""
        lx, ly = self._unrotate(x, y)
        along = ly - self.origin_y_mm
        if abs(lx - self.origin_x_mm) > self.half_width_mm or not (
            -_SKIRT_MM <= along <= self.length_mm + _SKIRT_MM
        ):
            return math.nan
        return self.surface_z_mm

    def with_rotation(self, deg: float) -> "PhantomModel":
        return replace(self, rotation_z_deg=deg)

    def to_dict(self) -> dict:
        return asdict(self)


def centerline_at(model: PhantomModel, s: float) -> np.ndarray:
    """World-frame centreline point (x, y, z) in mm at axial position ``s``."""
    if not (0.0 <= s <= model.length_mm) or math.isnan(s):
        raise DomainError(f"s={s} outside [0, {model.length_mm}]")
    lx = model.origin_x_mm + float(model._lateral(s))
    ly = model.origin_y_mm + s
    x, y = model._rotate(lx, ly)
    return np.array([x, y, model.vessel_z_mm])


def contact_force(model: PhantomModel, pose: "ProbePose") -> float:
    """Linear-spring contact force in newtons; zero off the skin or off the phantom."""
    h = model.surface_height(pose.x, pose.y)
    if math.isnan(h):
        return 0.0
    return model.stiffness_n_per_mm * max(0.0, h - pose.z)


def _world_y(model: PhantomModel, s):
    lx = model.origin_x_mm + model._lateral(s)
    ly = model.origin_y_mm + s
    return model._rotate(lx, ly)[1]


def vessel_cross_section(model: PhantomModel, pose: "ProbePose") -> CrossSection | None:
    """Intersect the imaging plane (world y = pose.y) with the vessel tube.

    Returns None when the plane does not cross the centreline within
    [0, length_mm].
    """
    L = model.length_mm
    grid = np.linspace(0.0, L, max(int(math.ceil(L)) + 1, 2))
    f = _world_y(model, grid) - pose.y
    roots = [float(s) for s, v in zip(grid, f) if v == 0.0]
    crossings = np.nonzero(np.signbit(f[:-1]) != np.signbit(f[1:]))[0]
    for i in crossings:
        if f[i] == 0.0 or f[i + 1] == 0.0:
            continue
        roots.append(brentq(lambda s: float(_world_y(model, s)) - pose.y, grid[i], grid[i + 1], xtol=1e-12))
    if not roots:
        return None

    best = None
    for s in roots:
        c = centerline_at(model, s)
        lateral = c[0] - pose.x
        if best is None or abs(lateral) < abs(best[1]):
            best = (s, lateral, c)
    s, lateral, c = best

    th = math.radians(model.rotation_z_deg)
    tx_l, ty_l = float(model._lateral_slope(s)), 1.0
    ty = math.sin(th) * tx_l + math.cos(th) * ty_l
    norm = math.hypot(tx_l, ty_l)
    cos_cut = abs(ty) / norm
    if cos_cut < 1e-6:
        return None
    r = model.lumen_radius_at(s)
    return CrossSection(
        lateral_mm=float(lateral),
        depth_mm=float(pose.z - c[2]),
        radius_mm=r / cos_cut,
        depth_radius_mm=r,
        s_mm=float(s),
    )


_ALIASES = {"stiffness": "stiffness_n_per_mm", "rotation_deg": "rotation_z_deg"}


def load_phantom(path: str | os.PathLike) -> PhantomModel:
    return PhantomModel(**coerce_fields(PhantomModel, read_keyvalue(path), _ALIASES))


def save_phantom(model: PhantomModel, path: str | os.PathLike) -> None:
    write_keyvalue(path, model.to_dict())
