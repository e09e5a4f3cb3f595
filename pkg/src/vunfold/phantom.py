"""Synthetic tube phantoms with analytic ground truth.

Two shapes are supported: a straight capped tube along +x and a "j-tube",
a capped quarter torus bending from +x towards +y in the z = const plane.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import (
    BACKGROUND,
    LABEL_AIR,
    LABEL_BACKGROUND,
    LABEL_WALL,
    LabelVolume,
    ScalarVolume,
)

LUMEN_HU = -1000
WALL_HU = 40
MARGIN_VOXELS = 5
SHAPES = ("straight", "j-tube")


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    shape: str = "straight"
    radius: float = 20.0
    wall: float = 4.0
    length: float = 100.0
    spacing: tuple = (1.0, 1.0, 1.0)
    dims: tuple | None = None


@dataclass
class PhantomTruth:
    shape: str
    axis: np.ndarray  # (n, 3) analytic centreline, mm, cardia -> pylorus
    radius: np.ndarray  # outer tube radius at each axis point, mm
    wall: float
    cardia: np.ndarray
    pylorus: np.ndarray
    ridge: np.ndarray  # (n, 3) expected incision path on the inner surface
    bend_center: np.ndarray | None = None
    bend_radius: float | None = None
    axisymmetric: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def inner_radius(self) -> np.ndarray:
        return self.radius - self.wall

    def axis_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.axis, axis=0), axis=1)))

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "axis": self.axis.tolist(),
            "radius": self.radius.tolist(),
            "wall": self.wall,
            "cardia": self.cardia.tolist(),
            "pylorus": self.pylorus.tolist(),
            "ridge": self.ridge.tolist(),
            "bend_center": None if self.bend_center is None else self.bend_center.tolist(),
            "bend_radius": self.bend_radius,
            "axisymmetric": self.axisymmetric,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomTruth":
        return cls(
            shape=obj["shape"],
            axis=np.asarray(obj["axis"], dtype=float),
            radius=np.asarray(obj["radius"], dtype=float),
            wall=float(obj["wall"]),
            cardia=np.asarray(obj["cardia"], dtype=float),
            pylorus=np.asarray(obj["pylorus"], dtype=float),
            ridge=np.asarray(obj["ridge"], dtype=float),
            bend_center=None if obj.get("bend_center") is None else np.asarray(obj["bend_center"]),
            bend_radius=obj.get("bend_radius"),
            axisymmetric=bool(obj.get("axisymmetric", False)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PhantomTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


def _straight_coords(points, origin, length):
    """Axial parameter t and radial distance for a tube along +x starting at origin."""
    rel = points - origin
    return rel[..., 0], np.hypot(rel[..., 1], rel[..., 2])


def _torus_coords(points, center, bend_radius, sweep):
    """Axial parameter and radial distance for a torus arc in the xy plane.

    The arc starts at ``center + (R_b, 0, 0)`` heading +y and sweeps ``sweep`` rad.
    Beyond either end the tube continues along the end tangent (for the caps).
    """
    rel = points - center
    x, y, z = rel[..., 0], rel[..., 1], rel[..., 2]
    phi = np.arctan2(y, x)
    t = bend_radius * phi
    rho = np.hypot(np.hypot(x, y) - bend_radius, z)

    # start end: tangent +y at (R_b, 0)
    t_start = y
    rho_start = np.hypot(x - bend_radius, z)
    # far end: point R_b*(cos s, sin s), tangent (-sin s, cos s)
    ex, ey = bend_radius * math.cos(sweep), bend_radius * math.sin(sweep)
    tx, ty = -math.sin(sweep), math.cos(sweep)
    along = (x - ex) * tx + (y - ey) * ty
    t_end = bend_radius * sweep + along
    rho_end = np.hypot(np.hypot(x - ex - along * tx, y - ey - along * ty), z)

    gap_start = np.abs(np.angle(np.exp(1j * phi)))
    gap_end = np.abs(np.angle(np.exp(1j * (phi - sweep))))
    outside = (phi < 0) | (phi > sweep)
    use_start = outside & (gap_start <= gap_end)
    use_end = outside & ~use_start
    t = np.where(use_start, t_start, np.where(use_end, t_end, t))
    rho = np.where(use_start, rho_start, np.where(use_end, rho_end, rho))
    return t, rho


def gen_phantom(spec: PhantomSpec | None = None, **kwargs):
    """Return ``(ScalarVolume, LabelVolume, PhantomTruth)`` for a capped tube."""
    if spec is None:
        spec = PhantomSpec(**kwargs)
    elif kwargs:
        raise TypeError("pass either a PhantomSpec or keyword arguments")
    if spec.shape not in SHAPES:
        raise PhantomError(f"unknown shape {spec.shape!r}; expected one of {SHAPES}")
    R, w, L = float(spec.radius), float(spec.wall), float(spec.length)
    if not (R > w > 0):
        raise PhantomError(f"need radius > wall > 0, got R={R} w={w}")
    if L <= 0:
        raise PhantomError(f"need length > 0, got {L}")
    spacing = np.asarray(spec.spacing, dtype=float)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise PhantomError(f"bad spacing {spec.spacing}")
    margin = MARGIN_VOXELS * spacing

    if spec.shape == "straight":
        lo_needed = np.array([-w, -R, -R])
        hi_needed = np.array([L + w, R, R])
    else:
        Rb = 2.0 * L / math.pi
        if Rb <= R:
            raise PhantomError(f"bend radius {Rb:.2f} mm must exceed tube radius {R}")
        # quarter torus around the origin; the caps stick out along -y and -x
        lo_needed = np.array([-w, -w, -R])
        hi_needed = np.array([Rb + R, Rb + R, R])

    # place the tube so that the needed box starts at the margin, on the voxel grid
    shift = np.ceil((margin - lo_needed) / spacing) * spacing
    extent = hi_needed + shift + margin
    auto_dims = np.floor(extent / spacing).astype(int) + 1
    if spec.dims is None:
        dims = auto_dims
    else:
        dims = np.asarray(spec.dims, dtype=int)
        if np.any(dims < auto_dims):
            raise PhantomError(
                f"tube does not fit the grid: needs at least {tuple(auto_dims)}, got {tuple(dims)}"
            )

    grids = np.meshgrid(*(np.arange(n) * s for n, s in zip(dims, spacing)), indexing="ij")
    pts = np.stack(grids, axis=-1)

    if spec.shape == "straight":
        origin = shift.copy()
        t, rho = _straight_coords(pts, origin, L)
        n_axis = max(int(round(L / min(spacing))), 1) + 1
        ts = np.linspace(0.0, L, n_axis)
        axis = origin + np.outer(ts, [1.0, 0.0, 0.0])
        ridge = axis + np.array([0.0, R - w, 0.0])
        bend_center, bend_radius = None, None
        axisym = True
        tangent_start = np.array([1.0, 0.0, 0.0])
        tangent_end = np.array([1.0, 0.0, 0.0])
    else:
        center = shift.copy()
        sweep = math.pi / 2
        t, rho = _torus_coords(pts, center, Rb, sweep)
        n_axis = max(int(round(L / min(spacing))), 1) + 1
        phis = np.linspace(0.0, sweep, n_axis)
        axis = center + np.stack([Rb * np.cos(phis), Rb * np.sin(phis), np.zeros_like(phis)], axis=1)
        ridge = center + np.stack(
            [(Rb + R - w) * np.cos(phis), (Rb + R - w) * np.sin(phis), np.zeros_like(phis)], axis=1
        )
        bend_center, bend_radius = center, Rb
        axisym = False
        tangent_start = np.array([0.0, 1.0, 0.0])
        tangent_end = np.array([-1.0, 0.0, 0.0])

    lumen = (t >= 0.0) & (t <= L) & (rho < R - w)
    tube = (t >= -w) & (t <= L + w) & (rho <= R)
    labels = np.full(dims, LABEL_BACKGROUND, dtype=np.uint8)
    labels[tube] = LABEL_WALL
    labels[lumen] = LABEL_AIR
    scalar = np.full(dims, BACKGROUND, dtype=np.int16)
    scalar[tube] = WALL_HU
    scalar[lumen] = LUMEN_HU

    inset = 2.0 * float(np.max(spacing))
    cardia = axis[0] + inset * tangent_start
    pylorus = axis[-1] - inset * tangent_end
    truth = PhantomTruth(
        shape=spec.shape,
        axis=axis,
        radius=np.full(len(axis), R),
        wall=w,
        cardia=cardia,
        pylorus=pylorus,
        ridge=ridge,
        bend_center=bend_center,
        bend_radius=bend_radius,
        axisymmetric=axisym,
    )
    sv = ScalarVolume(scalar, tuple(spacing))
    lv = LabelVolume(labels, tuple(spacing))
    return sv, lv, truth
