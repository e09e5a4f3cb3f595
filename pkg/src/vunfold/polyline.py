"""Small helpers for ordered 3-D point sequences."""
from __future__ import annotations

import numpy as np


def arc_lengths(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return np.zeros(0)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points) -> float:
    s = arc_lengths(points)
    return float(s[-1]) if len(s) else 0.0


def smooth_polyline(points, passes: int) -> np.ndarray:
    """3-point moving average with fixed endpoints."""
    pts = np.array(points, dtype=float)
    for _ in range(passes):
        if len(pts) < 3:
            break
        inner = (pts[:-2] + pts[1:-1] + pts[2:]) / 3.0
        pts = np.concatenate([pts[:1], inner, pts[-1:]])
    return pts


def resample_polyline(points, step: float, include_end: bool = True) -> np.ndarray:
    """Points at arc length 0, step, 2*step, ... along the polyline.

    With ``include_end`` the final vertex is appended when the last regular
    sample falls short of it.
    """
    pts = np.asarray(points, dtype=float)
    s = arc_lengths(pts)
    total = s[-1]
    if total <= 0.0:
        return pts[:1].copy()
    n = int(np.floor(total / step + 1e-9))
    targets = np.arange(n + 1) * step
    if include_end and total - targets[-1] > 1e-9 * max(total, 1.0):
        targets = np.append(targets, total)
    out = np.empty((len(targets), 3))
    for axis in range(3):
        out[:, axis] = np.interp(targets, s, pts[:, axis])
    return out


def point_to_polyline_distance(points, polyline) -> np.ndarray:
    """Euclidean distance from each point to the nearest segment of ``polyline``."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    line = np.asarray(polyline, dtype=float)
    if len(line) == 1:
        return np.linalg.norm(p - line[0], axis=1)
    a = line[:-1]
    ab = line[1:] - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0, denom, 1.0)
    best = np.full(len(p), np.inf)
    # chunk over points to bound memory
    for start in range(0, len(p), 4096):
        q = p[start:start + 4096, None, :]
        t = np.clip(np.einsum("pij,ij->pi", q - a[None], ab) / denom, 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d = np.linalg.norm(q - closest, axis=2).min(axis=1)
        best[start:start + 4096] = d
    return best
