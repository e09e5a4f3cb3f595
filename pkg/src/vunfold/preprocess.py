"""Air region, wall region, centreline and incision line extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .polyline import resample_polyline, smooth_polyline
from .volume import LABEL_AIR, LABEL_WALL, LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

AIR_THRESHOLD = -700.0
WALL_THRESHOLD = -500.0
WALL_SHELL_MM = 4.0
RESAMPLE_STEP_MM = 2.0
LANDMARK_SNAP_MM = 5.0
SLAB_HALF_WIDTH_MM = 1.5

_SIX = ndimage.generate_binary_structure(3, 1)
_OFFSETS_26 = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)]
)


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class Centerline:
    points: np.ndarray  # (K, 3) world mm, cardia -> pylorus

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise PreprocessError("a centreline needs at least two 3-D points")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class IncisionLine:
    points: np.ndarray  # (J, 3) world mm, J even

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise PreprocessError("an incision line needs at least two 3-D points")
        if len(pts) % 2:
            raise PreprocessError(f"incision line must have an even point count, got {len(pts)}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def _voxel_graph(mask: np.ndarray, spacing, weight_fn):
    """Sparse 26-neighbourhood graph over ``mask`` voxels.

    ``weight_fn(step_mm, dst_flat)`` returns edge weights; nodes are numbered in
    ascending x-fastest linear index so ties resolve towards lower indices.
    """
    dims = np.asarray(mask.shape)
    coords = np.argwhere(mask)  # C order: sorted by (i, j, k)
    lin = coords[:, 0] + dims[0] * (coords[:, 1] + dims[1] * coords[:, 2])
    order = np.argsort(lin, kind="stable")
    coords, lin = coords[order], lin[order]
    node_of = np.full(mask.shape, -1, dtype=np.int64)
    node_of[tuple(coords.T)] = np.arange(len(coords))
    rows, cols, weights = [], [], []
    sp = np.asarray(spacing, dtype=float)
    for off in _OFFSETS_26:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        src = np.nonzero(ok)[0]
        dst = node_of[tuple(nb[ok].T)]
        keep = dst >= 0
        src, dst = src[keep], dst[keep]
        step = float(np.linalg.norm(off * sp))
        rows.append(src)
        cols.append(dst)
        weights.append(weight_fn(step, coords[dst]))
    n = len(coords)
    graph = coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    return graph, coords, lin, node_of


def extract_air_region(scalar: ScalarVolume, seed, threshold: float = AIR_THRESHOLD) -> LabelVolume:
    """6-connected air component containing ``seed``, closed with a radius-1 ball."""
    idx = scalar.nearest_index(seed)
    if scalar.data[idx] > threshold:
        raise PreprocessError(
            f"seed {tuple(np.round(seed, 3))} is not in an air-like voxel "
            f"(intensity {int(scalar.data[idx])} > {threshold})"
        )
    air_like = scalar.data <= threshold
    components, _ = ndimage.label(air_like, structure=_SIX)
    region = components == components[idx]
    region = ndimage.binary_closing(region, structure=_SIX)
    labels = np.where(region, LABEL_AIR, 0).astype(np.uint8)
    return LabelVolume(labels, scalar.spacing)


def extract_wall_region(
    scalar: ScalarVolume,
    air: LabelVolume,
    shell_mm: float = WALL_SHELL_MM,
    threshold: float = WALL_THRESHOLD,
) -> LabelVolume:
    """Voxels brighter than ``threshold`` within a geodesic shell around the air region.

    Geodesic distance runs through candidate voxels only and is measured from
    the air/wall interface, half a voxel step outside the air voxel centres.
    """
    air_mask = air.mask(LABEL_AIR)
    if not air_mask.any():
        raise PreprocessError("air region is empty")
    sp = scalar.spacing_array
    candidate = (scalar.data > threshold) & ~air_mask
    # bound the graph with the Euclidean distance, which never exceeds the geodesic one
    euclid = ndimage.distance_transform_edt(~air_mask, sampling=sp)
    half_step = 0.5 * float(sp.min())
    band = candidate & (euclid <= shell_mm + half_step + 1e-9)
    labels = np.zeros(air.dims, dtype=np.uint8)
    if band.any():
        graph, coords, _, node_of = _voxel_graph(band, sp, lambda step, dst: np.full(len(dst), step))
        # seeds: band voxels touching air, at their distance to the nearest air centre
        dims = np.asarray(air_mask.shape)
        seed_dist = np.full(len(coords), np.inf)
        for off in _OFFSETS_26:
            nb = coords + off
            ok = np.all((nb >= 0) & (nb < dims), axis=1)
            hit = np.zeros(len(coords), dtype=bool)
            hit[ok] = air_mask[tuple(nb[ok].T)]
            seed_dist[hit] = np.minimum(seed_dist[hit], float(np.linalg.norm(off * sp)))
        seeds = np.nonzero(np.isfinite(seed_dist))[0]
        if len(seeds):
            n = len(coords)
            # super-source node n with edges carrying the seed offsets
            extra = coo_matrix(
                (seed_dist[seeds], (np.full(len(seeds), n), seeds)), shape=(n + 1, n + 1)
            )
            g = graph.tocoo()
            full = coo_matrix(
                (np.concatenate([g.data, extra.data]),
                 (np.concatenate([g.row, extra.row]), np.concatenate([g.col, extra.col]))),
                shape=(n + 1, n + 1),
            ).tocsr()
            dist = dijkstra(full, directed=True, indices=n)[:n]
            inside = dist - half_step <= shell_mm + 1e-9
            labels[tuple(coords[inside].T)] = LABEL_WALL
    if not labels.any():
        raise PreprocessError("empty wall: no voxel within the shell passes the wall threshold")
    return LabelVolume(labels, scalar.spacing)


def _snap_to_region(mask: np.ndarray, spacing, point, max_mm: float, what: str):
    sp = np.asarray(spacing, dtype=float)
    idx = np.clip(np.rint(np.asarray(point, dtype=float) / sp).astype(int), 0, np.asarray(mask.shape) - 1)
    if mask[tuple(idx)] and np.linalg.norm(idx * sp - point) <= max_mm + 1e-9:
        return tuple(idx)
    coords = np.argwhere(mask)
    if len(coords) == 0:
        raise PreprocessError("air region is empty")
    d = np.linalg.norm(coords * sp - np.asarray(point, dtype=float), axis=1)
    dims = np.asarray(mask.shape)
    lin = coords[:, 0] + dims[0] * (coords[:, 1] + dims[1] * coords[:, 2])
    best = np.lexsort((lin, np.round(d, 9)))[0]
    if d[best] > max_mm:
        raise PreprocessError(
            f"{what} landmark is {d[best]:.2f} mm from the air region (limit {max_mm} mm)"
        )
    return tuple(coords[best])


def extract_centerline(
    air: LabelVolume,
    cardia,
    pylorus,
    step_mm: float = RESAMPLE_STEP_MM,
    smoothing_passes: int = 5,
) -> Centerline:
    """Distance-weighted minimal path from cardia to pylorus through the air region."""
    air_mask = air.mask(LABEL_AIR)
    sp = air.spacing_array
    start = _snap_to_region(air_mask, sp, cardia, LANDMARK_SNAP_MM, "cardia")
    end = _snap_to_region(air_mask, sp, pylorus, LANDMARK_SNAP_MM, "pylorus")
    dt = ndimage.distance_transform_edt(air_mask, sampling=sp)
    graph, coords, lin, node_of = _voxel_graph(
        air_mask, sp, lambda step, dst: step / (1.0 + dt[tuple(dst.T)])
    )
    src, dst = int(node_of[start]), int(node_of[end])
    dist = dijkstra(graph, directed=True, indices=src)
    if not np.isfinite(dist[dst]):
        raise PreprocessError("unreachable: pylorus is not connected to the cardia through air")

    # walk back choosing, among exact-cost predecessors, the lowest linear index
    csc = graph.tocsc()
    path = [dst]
    node = dst
    while node != src:
        lo, hi = csc.indptr[node], csc.indptr[node + 1]
        preds, w = csc.indices[lo:hi], csc.data[lo:hi]
        total = dist[preds] + w
        tol = 1e-12 * max(1.0, dist[node])
        ok = np.abs(total - dist[node]) <= tol
        ok &= dist[preds] < dist[node]
        if not ok.any():
            ok = total <= total.min() + tol
        cand = preds[ok]
        node = int(cand[np.argmin(lin[cand])])
        path.append(node)
    path.reverse()
    pts = coords[path] * sp
    pts = smooth_polyline(pts, smoothing_passes)
    pts = resample_polyline(pts, step_mm, include_end=True)
    if len(pts) < 2:
        pts = np.vstack([pts[0], coords[dst] * sp])
    return Centerline(pts)


def inner_surface_voxels(wall: LabelVolume, air: LabelVolume) -> np.ndarray:
    """Wall voxels 6-adjacent to air, as an (N, 3) index array in linear-index order."""
    wall_mask = wall.mask(LABEL_WALL)
    near_air = ndimage.binary_dilation(air.mask(LABEL_AIR), structure=_SIX)
    coords = np.argwhere(wall_mask & near_air)
    lin = wall.linear_index(coords)
    return coords[np.argsort(lin, kind="stable")]


def _tangents(points: np.ndarray) -> np.ndarray:
    t = np.empty_like(points)
    t[1:-1] = points[2:] - points[:-2]
    t[0] = points[1] - points[0]
    t[-1] = points[-1] - points[-2]
    norm = np.linalg.norm(t, axis=1, keepdims=True)
    return t / np.where(norm > 0, norm, 1.0)


def determine_incision_line(
    wall: LabelVolume,
    air: LabelVolume,
    centerline: Centerline,
    cardia,
    pylorus,
    step_mm: float = RESAMPLE_STEP_MM,
    slab_mm: float = SLAB_HALF_WIDTH_MM,
    ridge_band_mm: float | None = None,
    smoothing_passes: int = 3,
) -> IncisionLine:
    """Greater-curvature ridge analogue along the inner wall surface.

    In each cross-section orthogonal to the centreline, the inner-surface
    voxels farthest from the centreline point (within ``ridge_band_mm`` of the
    maximum, three voxels by default) compete; the one farthest from the
    centreline centroid wins, which selects the outer side of a bend. Remaining ties go to the lowest
    linear voxel index.
    """
    sp = wall.spacing_array
    if ridge_band_mm is None:
        ridge_band_mm = 3.0 * float(sp.max())
    surf = inner_surface_voxels(wall, air)
    if len(surf) == 0:
        raise PreprocessError("no inner-surface voxels (wall voxels touching air)")
    pos = surf * sp
    c = centerline.points
    tangents = _tangents(c)
    centroid = c.mean(axis=0)
    from_centroid = np.round(np.sum((pos - centroid) ** 2, axis=1), 6)

    chosen = []
    for k in range(len(c)):
        offset = pos - c[k]
        in_slab = np.abs(offset @ tangents[k]) <= slab_mm + 1e-9
        if not in_slab.any():
            raise PreprocessError(f"cross-section {k} has no inner-surface voxel")
        cand = np.nonzero(in_slab)[0]
        d = np.linalg.norm(offset[cand], axis=1)
        cand = cand[d >= d.max() - ridge_band_mm - 1e-9]
        # cand is in ascending linear index; argmax returns the first maximum
        best = cand[np.argmax(from_centroid[cand])]
        if not chosen or chosen[-1] != best:
            chosen.append(int(best))

    def nearest_surface(point):
        d = np.round(np.linalg.norm(pos - np.asarray(point, dtype=float), axis=1), 9)
        return pos[int(np.argmin(d))]

    start, end = nearest_surface(cardia), nearest_surface(pylorus)
    ridge = smooth_polyline(pos[chosen], smoothing_passes)
    pts = resample_polyline(ridge, step_mm, include_end=True)
    if len(pts) % 2:
        pts = pts[:-1]
    if len(pts) < 2:
        raise PreprocessError("incision line is shorter than two resampling steps")
    # the end points are replaced, not prepended, so no chord cuts through the lumen
    pts[0] = start
    pts[-1] = end
    return IncisionLine(pts)
