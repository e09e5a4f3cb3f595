"""Unfolding targets: plane, stomach radii, base line and destination points.

Indices are 0-based internally; the incision midpoint ``u_{J/2}`` is ``u[J//2 - 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORIENTATIONS = ("backward", "forward")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class UnfoldPlane:
    normal: np.ndarray
    point: np.ndarray
    foot: np.ndarray  # x: foot of u_{J/2} on the segment u_1 u_J
    anchor_vertex: int  # vertex whose rest position gives ``point``

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.point) @ self.normal

    def project(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts - np.outer(self.signed_distance(pts), self.normal).reshape(pts.shape)


@dataclass(frozen=True)
class Radii:
    vertices: np.ndarray  # S_vb vertex ids
    eps: np.ndarray  # stomach radius at each vertex, mm
    j: np.ndarray  # nearest incision index
    k: np.ndarray  # centreline index nearest to u_j


@dataclass(frozen=True)
class BaseLine:
    points: np.ndarray  # p_j on the plane
    projected: np.ndarray  # u'_j
    v1: np.ndarray
    v2: np.ndarray


@dataclass(frozen=True)
class DestinationSet:
    vertices: np.ndarray
    eps: np.ndarray
    j: np.ndarray
    k: np.ndarray
    side: np.ndarray  # +1 or -1
    points: np.ndarray  # g, (N, 3)

    def __len__(self):
        return len(self.vertices)


def _points(obj) -> np.ndarray:
    return np.asarray(getattr(obj, "points", obj), dtype=float)


def _unit(v) -> np.ndarray:
    return v / np.linalg.norm(v)


def compute_unfold_plane(incision, model=None, *, inner_positions=None, inner_ids=None) -> UnfoldPlane:
    """Plane normal from the incision's mid-point bulge, anchored at the highest inner vertex."""
    u = _points(incision)
    if len(u) < 2 or len(u) % 2:
        raise GeometryError("incision needs an even number of points")
    u_first, u_last, u_mid = u[0], u[-1], u[len(u) // 2 - 1]
    seg = u_last - u_first
    seg_len2 = float(seg @ seg)
    if seg_len2 <= 1e-18:
        raise GeometryError("degenerate incision: u_1 coincides with u_J")
    t = min(max(float((u_mid - u_first) @ seg) / seg_len2, 0.0), 1.0)
    foot = u_first + t * seg
    bulge = u_mid - foot
    if np.linalg.norm(bulge) <= 1e-6:
        raise GeometryError("degenerate incision: u_{J/2} lies on the segment u_1 u_J")
    normal = _unit(bulge)

    if inner_positions is None:
        if model is None:
            raise GeometryError("need a wall model or inner vertex positions")
        inner_ids = np.asarray(model.s_vi)
        inner_positions = model.rest[inner_ids]
    inner_positions = np.asarray(inner_positions, dtype=float)
    if inner_ids is None:
        inner_ids = np.arange(len(inner_positions))
    if len(inner_positions) == 0:
        raise GeometryError("S_vi is empty")
    order = np.argsort(inner_ids, kind="stable")
    heights = inner_positions[order] @ normal
    best = order[int(np.argmax(heights))]
    return UnfoldPlane(normal, inner_positions[best].copy(), foot, int(inner_ids[best]))


def compute_radii(centerline, incision, model=None, *, vertices=None, positions=None) -> Radii:
    """Per cut-edge vertex: nearest incision index, its nearest centreline index and radius."""
    c, u = _points(centerline), _points(incision)
    if vertices is None:
        vertices = np.asarray(model.s_vb)
        positions = model.rest[vertices]
    vertices = np.asarray(vertices, dtype=np.int64)
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(vertices) == 0:
        raise GeometryError("S_vb is empty")
    if len(c) == 0 or len(u) == 0:
        raise GeometryError("centreline and incision must be nonempty")
    d_ru = np.sum((positions[:, None, :] - u[None, :, :]) ** 2, axis=2)
    j = np.argmin(d_ru, axis=1)
    d_cu = np.sum((c[None, :, :] - u[:, None, :]) ** 2, axis=2)
    k_of_j = np.argmin(d_cu, axis=1)
    k = k_of_j[j]
    eps = np.linalg.norm(c[k] - u[j], axis=1)
    return Radii(vertices, eps, j, k)


def sign_v1(v1_candidate, projected) -> np.ndarray:
    """Base-line direction pointing against u'_J - u'_1."""
    v = _unit(np.asarray(v1_candidate, dtype=float))
    span = projected[-1] - projected[0]
    return v if float(v @ span) < 0 else -v


def sign_v2(v2_candidate, v1, normal) -> np.ndarray:
    v = _unit(np.asarray(v2_candidate, dtype=float))
    return v if float(np.cross(v, v1) @ normal) < 0 else -v


def compute_base_line(incision, plane: UnfoldPlane, orientation: str = "backward") -> BaseLine:
    """Straightened, arc-length preserving image of the projected incision.

    ``orientation="backward"`` runs v1 against u'_J - u'_1. ``"forward"``
    flips v1 to run from u'_1 towards u'_J while keeping v2 from the backward
    rule, so each flap still maps to its own side of the base line.
    """
    if orientation not in ORIENTATIONS:
        raise GeometryError(f"orientation must be one of {ORIENTATIONS}")
    u = _points(incision)
    n = plane.normal
    proj = plane.project(u)
    centred = proj - proj.mean(axis=0)
    cov = centred.T @ centred / len(proj)
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] <= 1e-18:
        raise GeometryError("projected incision points all coincide")
    cand1 = evecs[:, 2]
    cand1 = _unit(cand1 - (cand1 @ n) * n)
    if evals[1] <= 1e-10 * evals[2]:
        cand2 = np.cross(n, cand1)  # collinear points: any in-plane perpendicular
    else:
        cand2 = evecs[:, 1]
    cand2 = cand2 - (cand2 @ n) * n - (cand2 @ cand1) * cand1
    if np.linalg.norm(cand2) <= 1e-12:
        cand2 = np.cross(n, cand1)
    cand2 = _unit(cand2)

    v1_rule = sign_v1(cand1, proj)
    v2 = sign_v2(cand2, v1_rule, n)
    v1 = v1_rule if orientation == "backward" else -v1_rule

    steps = np.linalg.norm(np.diff(proj, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(steps)])
    mid = len(proj) // 2 - 1
    points = proj[mid] + np.outer(s - s[mid], v1)
    return BaseLine(points, proj, v1, v2)


def side_of(u_j, u_prev, c_k, r) -> int:
    """+1 when ((u_j - c_k) x (r - c_k)) . (u_j - u_prev) >= 0, else -1."""
    triple = float(np.cross(u_j - c_k, r - c_k) @ (u_j - u_prev))
    return 1 if triple >= 0 else -1


def compute_destinations(radii: Radii, baseline: BaseLine, plane: UnfoldPlane, centerline, incision,
                         model=None, *, positions=None) -> DestinationSet:
    c, u = _points(centerline), _points(incision)
    if positions is None:
        positions = model.rest[radii.vertices]
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    j, k = radii.j, radii.k
    prev = np.where(j > 0, j - 1, 0)
    nxt = np.where(j > 0, j, 1)
    tangent = u[nxt] - u[prev]  # forward difference replaces u_0 at j = 0
    triple = np.einsum("ij,ij->i", np.cross(u[j] - c[k], positions - c[k]), tangent)
    side = np.where(triple >= 0, 1, -1)
    g = baseline.points[j] + (side * math.pi * radii.eps)[:, None] * baseline.v2[None, :]
    return DestinationSet(radii.vertices, radii.eps, j, k, side, g)


def force_direction(positions, dest: DestinationSet) -> np.ndarray:
    """e = g - r for every cut-edge vertex; ``positions`` covers all vertices."""
    return dest.points - np.asarray(positions, dtype=float)[dest.vertices]


@dataclass(frozen=True)
class UnfoldGeometry:
    plane: UnfoldPlane
    radii: Radii
    baseline: BaseLine
    destinations: DestinationSet


def compute_unfold_geometry(model, centerline, incision, orientation: str = "backward") -> UnfoldGeometry:
    plane = compute_unfold_plane(incision, model)
    radii = compute_radii(centerline, incision, model)
    base = compute_base_line(incision, plane, orientation)
    dest = compute_destinations(radii, base, plane, centerline, incision, model)
    return UnfoldGeometry(plane, radii, base, dest)


def dump_geometry(geom: UnfoldGeometry, path) -> None:
    """Plane, base line and destinations as whitespace-separated text for plotting."""
    pl = geom.plane
    lines = [
        "plane normal " + " ".join(f"{x:.9f}" for x in pl.normal),
        "plane point " + " ".join(f"{x:.9f}" for x in pl.point),
        "v1 " + " ".join(f"{x:.9f}" for x in geom.baseline.v1),
        "v2 " + " ".join(f"{x:.9f}" for x in geom.baseline.v2),
    ]
    for idx, p in enumerate(geom.baseline.points):
        lines.append(f"p {idx} " + " ".join(f"{x:.6f}" for x in p))
    d = geom.destinations
    for v, e, j, k, s, g in zip(d.vertices, d.eps, d.j, d.k, d.side, d.points):
        lines.append(f"g {v} {e:.6f} {j} {k} {'+' if s > 0 else '-'} " + " ".join(f"{x:.6f}" for x in g))
    Path(path).write_text("\n".join(lines) + "\n")
