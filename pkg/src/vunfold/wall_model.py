"""Hexahedral mass-spring-damper model of the wall.

Hexahedra sit on a regular lattice with stride ``d`` voxels in x and y and
``d_hat`` voxels in z; cell ``(a, b, c)`` is centred on voxel
``(a*d, b*d, c*d_hat)``. Vertices shared between cells are merged through
their lattice coordinates, so no floating-point welding is involved.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .polyline import point_to_polyline_distance
from .volume import LABEL_AIR, LABEL_WALL

log = logging.getLogger(__name__)

DENSITY = 1.0e-6  # kg / mm^3
EDGE_STIFFNESS = 30.0  # kg / s^2
DIAGONAL_STIFFNESS = 20.0
DAMPING = 0.03  # kg / s

EDGE, DIAGONAL = 0, 1

# VTK hexahedron ordering of the unit-cube corners
CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
)
HEX_EDGES = np.array(
    [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]
)
HEX_FACE_DIAGONALS = np.array(
    [(0, 2), (1, 3), (4, 6), (5, 7), (0, 5), (1, 4), (3, 6), (2, 7), (0, 7), (3, 4), (1, 6), (2, 5)]
)
# (local corner ids, outward lattice offset)
HEX_FACES = (
    ((0, 3, 2, 1), (0, 0, -1)),
    ((4, 5, 6, 7), (0, 0, 1)),
    ((0, 1, 5, 4), (0, -1, 0)),
    ((3, 7, 6, 2), (0, 1, 0)),
    ((0, 4, 7, 3), (-1, 0, 0)),
    ((1, 2, 6, 5), (1, 0, 0)),
)


class WallModelError(ValueError):
    pass


def slice_stride(d: int, spacing) -> int:
    """Lattice stride along z: ``d * pixel spacing / slice spacing``, rounded, at least 1."""
    sx, _, sz = (float(s) for s in spacing)
    return max(1, int(np.floor(d * sx / sz + 0.5)))


@dataclass
class WallModel:
    rest: np.ndarray  # (I, 3) rest positions, mm
    mass: np.ndarray  # (I,) kg
    springs: np.ndarray  # (S, 2) vertex ids, i < j
    rest_length: np.ndarray  # (S,) mm
    stiffness: np.ndarray  # (S,)
    damping: np.ndarray  # (S,) dampers co-located with springs
    kind: np.ndarray  # (S,) EDGE or DIAGONAL
    hexes: np.ndarray  # (H, 8) vertex ids, VTK order
    hex_cell: np.ndarray  # (H, 3) lattice coordinates
    hex_voxel: np.ndarray  # (H,) linear index of the centre voxel
    vertex_lattice: np.ndarray  # (I, 3) vertex lattice coordinates
    d: int
    d_hat: int
    spacing: tuple
    dims: tuple
    removed_cells: np.ndarray  # (R, 3) lattice cells cut out for the incision
    s_vo: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    s_vi: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    s_vb: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    diagnostics: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict, repr=False, compare=False)  # solver scratch

    @property
    def n_vertices(self) -> int:
        return len(self.rest)

    @property
    def cell_size(self) -> np.ndarray:
        """Hexahedron edge lengths in mm."""
        stride = np.array([self.d, self.d, self.d_hat], dtype=float)
        return stride * np.asarray(self.spacing, dtype=float)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_size))

    def surface_vertices(self) -> np.ndarray:
        return np.union1d(self.s_vo, self.s_vi)


def _cell_of_voxels(coords: np.ndarray, stride: np.ndarray) -> np.ndarray:
    # half-open cells [c*stride - stride/2, c*stride + stride/2)
    return np.floor((coords + stride / 2.0) / stride).astype(np.int64)


def _cell_flags(coords: np.ndarray, stride: np.ndarray, shape) -> np.ndarray:
    flags = np.zeros(shape, dtype=bool)
    if len(coords):
        cells = _cell_of_voxels(coords, stride)
        flags[tuple(cells.T)] = True
    return flags


def _lattice_shape(dims, stride) -> tuple:
    return tuple(int(np.floor((n - 1 + s / 2.0) / s)) + 2 for n, s in zip(dims, stride))


def _outward_directions(points, centerline, air_mask, spacing):
    if centerline is not None:
        c = np.asarray(centerline, dtype=float)
        diff = points[:, None, :] - c[None, :, :]
        nearest = np.argmin(np.einsum("pkj,pkj->pk", diff, diff), axis=1)
        out = points - c[nearest]
    else:
        from scipy import ndimage

        dist = ndimage.distance_transform_edt(~air_mask, sampling=spacing)
        dist = ndimage.gaussian_filter(dist, 1.0)
        grads = np.gradient(dist, *spacing)
        idx = np.clip(np.rint(points / spacing).astype(int), 0, np.asarray(air_mask.shape) - 1)
        out = np.stack([g[tuple(idx.T)] for g in grads], axis=1)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norm > 0, norm, 1.0)


def _incision_cells(incision, in_model, stride, spacing, centerline, air_mask):
    """Lattice cells crossed by the cut surface under the incision polyline.

    The cut surface is swept by rays leaving each incision point outward
    (away from the centreline) until the ray has passed through the wall cells.
    """
    sp = np.asarray(spacing, dtype=float)
    edge_mm = stride * sp
    step = 0.25 * float(edge_mm.min())
    pts = np.asarray(incision, dtype=float)
    dense = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        dense.extend(a + (b - a) * (np.arange(1, n + 1)[:, None] / n))
    dense = np.asarray(dense)
    dirs = _outward_directions(dense, centerline, air_mask, sp)
    reach = 4.0 * float(edge_mm.max())
    ts = np.arange(0.0, reach + step, step)
    shape = np.asarray(in_model.shape)
    removed = np.zeros(in_model.shape, dtype=bool)
    for p, o in zip(dense, dirs):
        ray = p[None, :] + ts[:, None] * o[None, :]
        cells = _cell_of_voxels(ray / sp, stride)
        valid = np.all((cells >= 0) & (cells < shape), axis=1)
        entered = False
        for cell, ok in zip(cells, valid):
            hit = ok and in_model[tuple(cell)]
            if hit:
                removed[tuple(cell)] = True
                entered = True
            elif entered:
                break
    return removed


def model_from_cells(
    cells,
    d: int = 8,
    spacing=(1.0, 1.0, 1.0),
    dims=None,
    density: float = DENSITY,
    edge_stiffness: float = EDGE_STIFFNESS,
    diagonal_stiffness: float = DIAGONAL_STIFFNESS,
    damping: float = DAMPING,
) -> WallModel:
    """Hexahedra, lumped masses and springs for a set of lattice cells.

    Vertex sets are left empty; ``build_hex_model`` fills them in.
    """
    cells = np.unique(np.asarray(cells, dtype=np.int64).reshape(-1, 3), axis=0)
    if len(cells) == 0:
        raise WallModelError("no lattice cells given")
    if cells.min() < 0:
        raise WallModelError("lattice cells must have non-negative coordinates")
    spacing = np.asarray(spacing, dtype=float)
    d = int(d)
    d_hat = slice_stride(d, spacing)
    stride = np.array([d, d, d_hat], dtype=float)
    istride = stride.astype(np.int64)
    if dims is None:
        dims = tuple(int(n) for n in cells.max(axis=0) * istride + 1)
    nx, ny = int(dims[0]), int(dims[1])
    # order hexahedra by centre-voxel linear index (z slowest) for determinism
    order = np.lexsort((cells[:, 0], cells[:, 1], cells[:, 2]))
    cells = cells[order]
    centers = cells * istride
    hex_voxel = centers[:, 0] + nx * (centers[:, 1] + ny * centers[:, 2])

    # vertex lattice coordinate of corner (i,j,k) of cell c is c + (i,j,k)
    flat = (cells[:, None, :] + CORNERS[None, :, :]).reshape(-1, 3)
    vshape = flat.max(axis=0) + 1
    key = flat[:, 0] + vshape[0] * (flat[:, 1] + vshape[1] * flat[:, 2])
    uniq, inverse = np.unique(key, return_inverse=True)
    hexes = inverse.reshape(-1, 8).astype(np.int64)
    vertex_lattice = np.stack(
        [uniq % vshape[0], (uniq // vshape[0]) % vshape[1], uniq // (vshape[0] * vshape[1])], axis=1
    )

    # vertex world position: lattice v -> voxel index (v - 1/2) * stride
    rest = (vertex_lattice - 0.5) * stride * spacing
    cell_volume = float(np.prod(stride * spacing))
    mass = np.zeros(len(rest))
    np.add.at(mass, hexes.ravel(), density * cell_volume / 8.0)

    pairs = []
    kinds = []
    for table, kind in ((HEX_EDGES, EDGE), (HEX_FACE_DIAGONALS, DIAGONAL)):
        p = hexes[:, table].reshape(-1, 2)
        pairs.append(np.sort(p, axis=1))
        kinds.append(np.full(len(p), kind))
    pairs = np.concatenate(pairs)
    kinds = np.concatenate(kinds)
    # deduplicate; an edge is never also a face diagonal, so kind is unambiguous
    pair_key = pairs[:, 0] * len(rest) + pairs[:, 1]
    _, first = np.unique(pair_key, return_index=True)
    pairs, kinds = pairs[first], kinds[first]
    rest_length = np.linalg.norm(rest[pairs[:, 0]] - rest[pairs[:, 1]], axis=1)
    stiffness = np.where(kinds == EDGE, edge_stiffness, diagonal_stiffness).astype(float)

    return WallModel(
        rest=rest,
        mass=mass,
        springs=pairs.astype(np.int64),
        rest_length=rest_length,
        stiffness=stiffness,
        damping=np.full(len(pairs), float(damping)),
        kind=kinds,
        hexes=hexes,
        hex_cell=cells,
        hex_voxel=hex_voxel,
        vertex_lattice=vertex_lattice,
        d=d,
        d_hat=d_hat,
        spacing=tuple(float(x) for x in spacing),
        dims=tuple(int(n) for n in dims),
        removed_cells=np.zeros((0, 3), dtype=np.int64),
    )


def build_hex_model(
    wall,
    air,
    incision,
    d: int = 8,
    centerline=None,
    tiling: str = "cover",
    density: float = DENSITY,
    edge_stiffness: float = EDGE_STIFFNESS,
    diagonal_stiffness: float = DIAGONAL_STIFFNESS,
    damping: float = DAMPING,
    boundary_radius: float | None = None,
) -> WallModel:
    """Build the hexahedral model over the wall region and cut the incision out.

    ``tiling="cover"`` keeps every lattice cell holding at least one wall voxel;
    ``tiling="center"`` keeps cells whose centre voxel is wall.
    """
    if int(d) != d or d < 2:
        raise WallModelError(f"d must be an integer >= 2, got {d}")
    d = int(d)
    if tiling not in ("cover", "center"):
        raise WallModelError(f"unknown tiling {tiling!r}")
    wall_mask = wall.mask(LABEL_WALL)
    air_mask = air.mask(LABEL_AIR)
    if not wall_mask.any():
        raise WallModelError("wall region is empty")
    spacing = np.asarray(wall.spacing, dtype=float)
    d_hat = slice_stride(d, spacing)
    stride = np.array([d, d, d_hat], dtype=float)
    shape = _lattice_shape(wall.dims, stride)

    if tiling == "cover":
        in_model = _cell_flags(np.argwhere(wall_mask), stride, shape)
    else:
        in_model = np.zeros(shape, dtype=bool)
        cells = np.argwhere(np.ones(shape, dtype=bool))
        centers = cells * stride.astype(int)
        ok = np.all(centers < np.asarray(wall.dims), axis=1)
        cells, centers = cells[ok], centers[ok]
        in_model[tuple(cells[wall_mask[tuple(centers.T)]].T)] = True
    if not in_model.any():
        raise WallModelError(f"d={d} too large: no lattice cell fits the wall region")

    inc_pts = np.asarray(getattr(incision, "points", incision), dtype=float)
    cl_pts = None if centerline is None else np.asarray(getattr(centerline, "points", centerline))
    removed = _incision_cells(inc_pts, in_model, stride, spacing, cl_pts, air_mask)
    in_model &= ~removed

    cells = np.argwhere(in_model)  # lexicographic (a, b, c)
    if len(cells) == 0:
        raise WallModelError("incision removal left no hexahedra")
    params = dict(d=d, spacing=spacing, dims=wall.dims, density=density, edge_stiffness=edge_stiffness,
                  diagonal_stiffness=diagonal_stiffness, damping=damping)
    model = model_from_cells(cells, **params)

    # keep the largest vertex-connected component
    n_hex, n_vert = len(model.hexes), model.n_vertices
    rows = np.repeat(np.arange(n_hex), 8)
    inc = coo_matrix((np.ones(n_hex * 8), (rows, model.hexes.ravel())), shape=(n_hex, n_vert)).tocsr()
    n_comp, comp = connected_components((inc @ inc.T).tocsr(), directed=False)
    diagnostics = {"components": int(n_comp), "removed_incision_cells": int(removed.sum())}
    if n_comp > 1:
        sizes = np.bincount(comp)
        keep_label = int(np.argmax(sizes))
        dropped = int(n_hex - sizes[keep_label])
        log.warning("incision removal split the model into %d components; keeping the largest "
                    "(%d hexahedra dropped)", n_comp, dropped)
        diagnostics["dropped_hexahedra"] = dropped
        model = model_from_cells(model.hex_cell[comp == keep_label], **params)
    model.removed_cells = np.argwhere(removed)
    model.diagnostics = diagnostics
    s_vo, s_vi, s_vb = classify_vertex_sets(model, air, inc_pts, boundary_radius=boundary_radius)
    model.s_vo, model.s_vi, model.s_vb = s_vo, s_vi, s_vb
    return model


def classify_vertex_sets(model: WallModel, air, incision, boundary_radius: float | None = None):
    """Return ``(S_vo, S_vi, S_vb)`` as sorted vertex-id arrays.

    A boundary face is inner when the absent neighbour cell overlaps air or was
    cut out for the incision, and outer otherwise. ``S_vb`` holds the vertices
    on both surfaces lying within ``boundary_radius`` mm (default
    ``2 * d * max(spacing)``) of the incision polyline.
    """
    stride = np.array([model.d, model.d, model.d_hat], dtype=float)
    shape = _lattice_shape(model.dims, stride)
    padded = tuple(n + 2 for n in shape)  # +1 offset so a-1 never wraps

    present = np.zeros(padded, dtype=bool)
    present[tuple((model.hex_cell + 1).T)] = True
    removed = np.zeros(padded, dtype=bool)
    if len(model.removed_cells):
        removed[tuple((model.removed_cells + 1).T)] = True
    air_cells = np.zeros(padded, dtype=bool)
    air_coords = np.argwhere(air.mask(LABEL_AIR))
    if len(air_coords):
        air_cells[tuple((_cell_of_voxels(air_coords, stride) + 1).T)] = True

    inner, outer = [], []
    cells = model.hex_cell + 1
    for corners, offset in HEX_FACES:
        nb = tuple((cells + np.asarray(offset)).T)
        boundary = ~present[nb]
        is_inner = boundary & (removed[nb] | air_cells[nb])
        is_outer = boundary & ~is_inner
        face_vertices = model.hexes[:, list(corners)]
        inner.append(face_vertices[is_inner].ravel())
        outer.append(face_vertices[is_outer].ravel())
    s_vi = np.unique(np.concatenate(inner)).astype(np.int64)
    s_vo = np.unique(np.concatenate(outer)).astype(np.int64)

    both = np.intersect1d(s_vo, s_vi)
    if boundary_radius is None:
        boundary_radius = 2.0 * model.d * max(model.spacing)
    inc_pts = np.asarray(getattr(incision, "points", incision), dtype=float)
    if len(both):
        dist = point_to_polyline_distance(model.rest[both], inc_pts)
        s_vb = both[dist <= boundary_radius + 1e-9]
    else:
        s_vb = both
    return s_vo, s_vi, s_vb.astype(np.int64)


def dump_model(model: WallModel, path) -> None:
    """Line-oriented diagnostic dump: vertices, springs, hexahedra and vertex sets."""
    lines = []
    for i, (p, m) in enumerate(zip(model.rest, model.mass)):
        lines.append(f"v {i} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {m:.9g}")
    names = {EDGE: "edge", DIAGONAL: "diagonal"}
    for (i, j), length, k, kind in zip(model.springs, model.rest_length, model.stiffness, model.kind):
        lines.append(f"s {i} {j} {length:.6f} {k:.9g} {names[int(kind)]}")
    for h, verts in enumerate(model.hexes):
        lines.append(f"h {h} " + " ".join(str(int(v)) for v in verts))
    for name, ids in (("vo", model.s_vo), ("vi", model.s_vi), ("vb", model.s_vb)):
        lines.append(f"set {name} " + " ".join(str(int(v)) for v in ids))
    Path(path).write_text("\n".join(lines) + "\n")
