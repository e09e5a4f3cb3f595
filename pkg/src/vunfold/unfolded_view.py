"""Resample the source volume into the flattened sheet and render it.

Every output voxel centre is located inside a deformed hexahedron, its local
trilinear coordinates are recovered by Newton iteration, and the same local
coordinates are pushed through the rest-shape hexahedron to find where to
sample the source.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import BACKGROUND, LabelVolume, ScalarVolume, read_volume, sample_trilinear, write_volume
from .wall_model import CORNERS, HEX_FACES

log = logging.getLogger(__name__)

RENDER_MODES = ("mip", "slab-average")
NEWTON_STEPS = 10
NEWTON_TOL = 1e-6
INTERIOR_TOL = 1e-6  # local-coordinate margin separating "strictly inside" from a shared face
WALL_LIKE = -500.0
MAX_GRID_VOXELS = 200_000_000  # guards against resampling an exploded model


class UnfoldError(ValueError):
    pass


@dataclass(frozen=True)
class UnfoldedGrid:
    origin: np.ndarray  # world position of voxel (0, 0, 0)
    axes: np.ndarray  # (3, 3) rows: v1, v2, plane normal
    spacing: np.ndarray  # (3,) mm
    dims: tuple

    def index_to_world(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=float)
        return self.origin + (idx * self.spacing) @ self.axes

    def world_to_index(self, points) -> np.ndarray:
        rel = np.asarray(points, dtype=float) - self.origin
        return (rel @ self.axes.T) / self.spacing

    def voxel_centers(self) -> np.ndarray:
        """World positions of all voxels, shape dims + (3,)."""
        grids = np.meshgrid(*(np.arange(n) for n in self.dims), indexing="ij")
        idx = np.stack(grids, axis=-1)
        return self.index_to_world(idx)

    def to_dict(self) -> dict:
        return {
            "origin": [float(x) for x in self.origin],
            "axes": [[float(x) for x in row] for row in self.axes],
            "spacing": [float(x) for x in self.spacing],
            "dims": [int(n) for n in self.dims],
        }


def in_plane_axes(normal, v1=None):
    """Orthonormal in-plane pair; ``v1`` defaults to the world axis least aligned with ``normal``."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if v1 is None:
        v1 = np.eye(3)[int(np.argmin(np.abs(n)))]
    v1 = np.asarray(v1, dtype=float)
    v1 = v1 - (v1 @ n) * n
    v1 = v1 / np.linalg.norm(v1)
    return v1, np.cross(n, v1)


def build_unfolded_grid(plane, positions, spacing, margin: float = 5.0, v1=None, v2=None) -> UnfoldedGrid:
    """Bounding box of ``positions`` in (v1, v2, n) coordinates.

    The in-plane axes are padded by ``margin`` mm; the thickness axis covers
    exactly the extent along the plane normal.
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise UnfoldError("empty model: no vertices to bound")
    if margin < 0:
        raise UnfoldError("margin must be >= 0")
    if not np.all(np.isfinite(pts)):
        raise UnfoldError("vertex positions are not finite")
    n = np.asarray(plane.normal, dtype=float)
    if v2 is None:
        v1, v2 = in_plane_axes(n, v1)
    axes = np.stack([np.asarray(v1, float), np.asarray(v2, float), n])
    spacing = np.asarray(spacing, dtype=float)
    coords = pts @ axes.T
    lo = coords.min(axis=0) - np.array([margin, margin, 0.0])
    hi = coords.max(axis=0) + np.array([margin, margin, 0.0])
    dims = tuple(int(np.floor((h - l) / s + 1e-9)) + 1 for l, h, s in zip(lo, hi, spacing))
    if math.prod(dims) > MAX_GRID_VOXELS:
        raise UnfoldError(f"unfolded grid {dims} exceeds {MAX_GRID_VOXELS} voxels")
    return UnfoldedGrid(lo @ axes, axes, spacing, dims)


def _shape(xi):
    """Trilinear shape functions (P, 8) and derivatives (P, 8, 3) at local coords (P, 3)."""
    c = CORNERS[None, :, :]
    x = xi[:, None, :]
    f = np.where(c == 1, x, 1.0 - x)  # (P, 8, 3)
    n = f.prod(axis=2)
    sign = np.where(c == 1, 1.0, -1.0)
    grad = np.empty(xi.shape[:1] + (8, 3))
    grad[..., 0] = sign[..., 0] * f[..., 1] * f[..., 2]
    grad[..., 1] = f[..., 0] * sign[..., 1] * f[..., 2]
    grad[..., 2] = f[..., 0] * f[..., 1] * sign[..., 2]
    return n, grad


def trilinear_map(corners, xi) -> np.ndarray:
    """Map local coordinates (P, 3) through hexahedra corners (P, 8, 3)."""
    n, _ = _shape(np.asarray(xi, dtype=float))
    return np.einsum("pc,pcd->pd", n, corners)


def center_jacobian(corners) -> np.ndarray:
    """Determinant of the trilinear Jacobian at each hexahedron centre."""
    corners = np.asarray(corners, dtype=float)
    _, grad = _shape(np.full((len(corners), 3), 0.5))
    jac = np.einsum("pcd,pce->pde", corners, grad)
    return np.linalg.det(jac)


def invert_trilinear(corners, points, steps: int = NEWTON_STEPS, tol: float = NEWTON_TOL):
    """Newton inversion seeded at the cell centre; returns (xi, converged)."""
    corners = np.asarray(corners, dtype=float)
    q = np.asarray(points, dtype=float)
    xi = np.full(q.shape, 0.5)
    done = np.zeros(len(q), dtype=bool)
    for _ in range(steps):
        act = ~done
        if not act.any():
            break
        n, grad = _shape(xi[act])
        resid = np.einsum("pc,pcd->pd", n, corners[act]) - q[act]
        jac = np.einsum("pcd,pce->pde", corners[act], grad)
        ok = np.abs(np.linalg.det(jac)) > 1e-12
        delta = np.zeros_like(resid)
        delta[ok] = np.linalg.solve(jac[ok], resid[ok][..., None])[..., 0]
        delta[~ok] = np.nan
        xi[act] = xi[act] - delta
        step = np.max(np.abs(delta), axis=1)
        idx = np.nonzero(act)[0]
        done[idx[step <= tol]] = True
        bad = ~np.isfinite(step)
        if bad.any():
            done[idx[bad]] = True
    converged = done & np.all(np.isfinite(xi), axis=1)
    return xi, converged


@dataclass
class UnfoldedVolume:
    values: np.ndarray  # float samples, BACKGROUND where masked out
    mask: np.ndarray  # bool, inside some deformed hexahedron
    grid: UnfoldedGrid
    hex_id: np.ndarray = None  # owning hexahedron per voxel, -1 outside
    overlap_voxels: int = 0
    diagnostics: dict = field(default_factory=dict)
    footprint: np.ndarray = None  # (nx, ny) projected sheet, when the deformed model is known

    @property
    def overlap_fraction(self) -> float:
        inside = int(np.count_nonzero(self.mask))
        return self.overlap_voxels / inside if inside else 0.0

    def to_scalar(self) -> ScalarVolume:
        data = np.where(self.mask, np.floor(self.values + 0.5), BACKGROUND)
        data = np.clip(data, -32768, 32767).astype(np.int16)
        return ScalarVolume(data, tuple(float(s) for s in self.grid.spacing))

    def quantized(self) -> "UnfoldedVolume":
        """Copy holding the values exactly as saved, so re-rendering a file reproduces the image."""
        values = self.to_scalar().data.astype(float)
        return UnfoldedVolume(values, self.mask, self.grid, self.hex_id, self.overlap_voxels,
                              dict(self.diagnostics), self.footprint)

    def mask_volume(self) -> LabelVolume:
        return LabelVolume(self.mask.astype(np.uint8), tuple(float(s) for s in self.grid.spacing))

    def save(self, path, mask_path) -> None:
        write_volume(self.to_scalar(), path)
        write_volume(self.mask_volume(), mask_path)

    @classmethod
    def load(cls, path, mask_path=None) -> "UnfoldedVolume":
        """Read a saved volume; without a mask file the mask is ``values != BACKGROUND``."""
        vol = read_volume(path)
        if not isinstance(vol, ScalarVolume):
            raise UnfoldError(f"{path}: expected a scalar volume")
        values = vol.data.astype(float)
        if mask_path is not None:
            m = read_volume(mask_path)
            if m.dims != vol.dims:
                raise UnfoldError("mask dimensions differ from the volume")
            mask = m.data != 0
        else:
            mask = vol.data != BACKGROUND
        spacing = np.asarray(vol.spacing, dtype=float)
        grid = UnfoldedGrid(np.zeros(3), np.eye(3), spacing, vol.dims)
        return cls(values, mask, grid)


def _candidate_pairs(grid: UnfoldedGrid, corners):
    """(hexahedron, voxel index) pairs whose voxel centre lies in the hexahedron's bounding box."""
    idx = grid.world_to_index(corners.reshape(-1, 3)).reshape(corners.shape)
    lo = np.maximum(np.ceil(idx.min(axis=1) - 1e-9).astype(np.int64), 0)
    hi = np.minimum(np.floor(idx.max(axis=1) + 1e-9).astype(np.int64), np.asarray(grid.dims) - 1)
    counts = np.prod(np.maximum(hi - lo + 1, 0), axis=1)
    hex_ids = np.repeat(np.arange(len(corners)), counts)
    if len(hex_ids) == 0:
        return hex_ids, np.zeros((0, 3), dtype=np.int64)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(len(hex_ids)) - np.repeat(start, counts)
    ext = np.maximum(hi - lo + 1, 1)[hex_ids]
    i = local % ext[:, 0]
    j = (local // ext[:, 0]) % ext[:, 1]
    k = local // (ext[:, 0] * ext[:, 1])
    vox = lo[hex_ids] + np.stack([i, j, k], axis=1)
    return hex_ids, vox


def resample_unfolded(source: ScalarVolume, hexes, rest_positions, deformed_positions, grid: UnfoldedGrid,
                      chunk: int = 200_000) -> UnfoldedVolume:
    """Pull source intensities into ``grid`` through the rest/deformed hexahedron correspondence."""
    hexes = np.asarray(hexes, dtype=np.int64)
    if len(hexes) == 0:
        raise UnfoldError("model has no hexahedra")
    rest_c = np.asarray(rest_positions, dtype=float)[hexes]
    def_c = np.asarray(deformed_positions, dtype=float)[hexes]
    det = center_jacobian(def_c)
    rest_det = center_jacobian(rest_c)
    # same orientation as the rest shape counts as valid
    degenerate = ~(det * np.sign(rest_det) > 1e-12)
    usable = np.nonzero(~degenerate)[0]

    dims = grid.dims
    n_vox = int(np.prod(dims))
    owner = np.full(n_vox, np.iinfo(np.int64).max, dtype=np.int64)
    owner_src = np.zeros((n_vox, 3))
    interior_hits = np.zeros(n_vox, dtype=np.int32)
    newton_failures = 0

    hex_ids, vox = _candidate_pairs(grid, def_c[usable])
    hex_ids = usable[hex_ids]
    for s in range(0, len(hex_ids), chunk):
        h = hex_ids[s:s + chunk]
        v = vox[s:s + chunk]
        q = grid.index_to_world(v)
        xi, ok = invert_trilinear(def_c[h], q)
        newton_failures += int(np.count_nonzero(~ok))
        inside = ok & np.all((xi >= -1e-9) & (xi <= 1.0 + 1e-9), axis=1)
        strict = ok & np.all((xi > INTERIOR_TOL) & (xi < 1.0 - INTERIOR_TOL), axis=1)
        lin = np.ravel_multi_index(tuple(v.T), dims, order="F")
        np.add.at(interior_hits, lin[strict], 1)
        h_in, lin_in, xi_in = h[inside], lin[inside], np.clip(xi[inside], 0.0, 1.0)
        # lowest hexahedron id wins; sort so the first occurrence per voxel is the minimum
        order = np.lexsort((h_in, lin_in))
        lin_in, h_in, xi_in = lin_in[order], h_in[order], xi_in[order]
        first = np.ones(len(lin_in), dtype=bool)
        first[1:] = lin_in[1:] != lin_in[:-1]
        lin_in, h_in, xi_in = lin_in[first], h_in[first], xi_in[first]
        better = h_in < owner[lin_in]
        lin_in, h_in, xi_in = lin_in[better], h_in[better], xi_in[better]
        owner[lin_in] = h_in
        owner_src[lin_in] = trilinear_map(rest_c[h_in], xi_in)

    mask_flat = owner != np.iinfo(np.int64).max
    values_flat = np.full(n_vox, float(BACKGROUND))
    values_flat[mask_flat] = sample_trilinear(source, owner_src[mask_flat])
    hex_flat = np.where(mask_flat, owner, -1)
    shape = tuple(dims)
    diagnostics = {
        "degenerate_hexahedra": int(np.count_nonzero(degenerate)),
        "newton_failures": newton_failures,
        "candidate_pairs": int(len(hex_ids)),
    }
    if diagnostics["degenerate_hexahedra"]:
        log.warning("%d deformed hexahedra are degenerate and were skipped", diagnostics["degenerate_hexahedra"])
    return UnfoldedVolume(
        values=values_flat.reshape(shape, order="F"),
        mask=mask_flat.reshape(shape, order="F"),
        grid=grid,
        hex_id=hex_flat.reshape(shape, order="F"),
        overlap_voxels=int(np.count_nonzero(interior_hits >= 2)),
        diagnostics=diagnostics,
        footprint=projected_footprint(grid, def_c[usable]),
    )


def footprint(uv: UnfoldedVolume) -> np.ndarray:
    """Pixels whose column hits the sheet: the projected deformed hexahedra when known,
    otherwise the voxel mask."""
    if uv.footprint is not None:
        return uv.footprint
    return uv.mask.any(axis=2)


def _face_triangles(corners) -> np.ndarray:
    tris = []
    for ids, _ in HEX_FACES:
        tris.append(corners[:, [ids[0], ids[1], ids[2]]])
        tris.append(corners[:, [ids[0], ids[2], ids[3]]])
    return np.concatenate(tris, axis=0)


def projected_footprint(grid: UnfoldedGrid, corners, chunk: int = 500_000) -> np.ndarray:
    """Rasterise the projection of hexahedra along the thickness axis.

    A closed surface covers the same projected region as the solid it bounds,
    so the union of the 12 face triangles per hexahedron is rasterised;
    pixel centres on a shared edge count for both sides.
    """
    nx, ny = grid.dims[0], grid.dims[1]
    out = np.zeros((nx, ny), dtype=bool)
    corners = np.asarray(corners, dtype=float)
    if len(corners) == 0:
        return out
    idx = grid.world_to_index(corners.reshape(-1, 3))[:, :2].reshape(corners.shape[:2] + (2,))
    tri = _face_triangles(idx)  # (T, 3, 2)
    lo = np.maximum(np.ceil(tri.min(axis=1) - 1e-9).astype(np.int64), 0)
    hi = np.minimum(np.floor(tri.max(axis=1) + 1e-9).astype(np.int64), np.array([nx - 1, ny - 1]))
    ext = np.maximum(hi - lo + 1, 0)
    counts = ext[:, 0] * ext[:, 1]
    tid = np.repeat(np.arange(len(tri)), counts)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(len(tid)) - np.repeat(start, counts)
    for s in range(0, len(tid), chunk):
        t = tid[s:s + chunk]
        loc = local[s:s + chunk]
        e = np.maximum(ext[t], 1)
        px = lo[t] + np.stack([loc % e[:, 0], loc // e[:, 0]], axis=1)
        a, b, c = tri[t, 0], tri[t, 1], tri[t, 2]
        p = px.astype(float)

        def cross(u, v):
            return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

        area = cross(b - a, c - a)
        w0, w1, w2 = cross(b - p, c - p), cross(c - p, a - p), cross(a - p, b - p)
        tol = 1e-9 * np.maximum(np.abs(area), 1e-300)
        sgn = np.sign(area)
        hit = (np.abs(area) > 1e-12) & (w0 * sgn >= -tol) & (w1 * sgn >= -tol) & (w2 * sgn >= -tol)
        out[px[hit, 0], px[hit, 1]] = True
    return out


def broken_fraction(uv: UnfoldedVolume) -> float:
    """Share of footprint pixels that border a hole enclosed by the sheet."""
    fp = footprint(uv)
    total = int(np.count_nonzero(fp))
    if total == 0:
        return 0.0
    holes = ndimage.binary_fill_holes(fp) & ~fp
    if not holes.any():
        return 0.0
    near = ndimage.binary_dilation(holes, structure=ndimage.generate_binary_structure(2, 1))
    return int(np.count_nonzero(near & fp)) / total


def mid_surface_heights(uv: UnfoldedVolume, plane) -> np.ndarray:
    """Signed height above the plane of the sheet mid-point in every footprint column."""
    mask = uv.mask
    fp = mask.any(axis=2)
    nz = mask.shape[2]
    k = np.arange(nz)
    kmin = np.where(mask, k, nz).min(axis=2)[fp]
    kmax = np.where(mask, k, -1).max(axis=2)[fp]
    mid_k = 0.5 * (kmin + kmax)
    g = uv.grid
    offset = float((g.origin - np.asarray(plane.point, dtype=float)) @ g.axes[2])
    return offset + mid_k * g.spacing[2]


def bending_rms(uv: UnfoldedVolume, plane) -> float:
    h = mid_surface_heights(uv, plane)
    return float(np.sqrt(np.mean(h * h))) if len(h) else 0.0


def sheet_width(uv: UnfoldedVolume, point) -> float:
    """Footprint extent along the second grid axis, on the row through ``point``."""
    g = uv.grid
    i = int(np.floor(g.world_to_index(np.asarray(point, dtype=float))[0] + 0.5))
    if not 0 <= i < g.dims[0]:
        return 0.0
    row = np.nonzero(footprint(uv)[i])[0]
    if len(row) == 0:
        return 0.0
    return float((row[-1] - row[0] + 1) * g.spacing[1])


def wall_like_fraction(uv: UnfoldedVolume, threshold: float = WALL_LIKE) -> float:
    inside = int(np.count_nonzero(uv.mask))
    if inside == 0:
        return 0.0
    return int(np.count_nonzero(uv.mask & (uv.values > threshold))) / inside


def defect_metrics(uv: UnfoldedVolume, plane) -> dict:
    return {
        "overlap_fraction": uv.overlap_fraction,
        "broken_fraction": broken_fraction(uv),
        "bending_rms": bending_rms(uv, plane),
        "wall_like_fraction": wall_like_fraction(uv),
    }


def window_transfer(values, center: float, width: float) -> np.ndarray:
    """Linear window/level to 0..255 with round-half-up."""
    if not width > 0:
        raise UnfoldError("window width must be > 0")
    lo = center - width / 2.0
    scaled = np.floor((np.asarray(values, dtype=float) - lo) / width * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def render_view(uv: UnfoldedVolume, center: float = 40.0, width: float = 400.0, mode: str = "mip") -> np.ndarray:
    """Orthographic projection along the plane normal; returns a (rows, cols) uint8 image.

    Rows follow the second grid axis and columns the first.
    """
    if not width > 0:
        raise UnfoldError("window width must be > 0")
    if mode not in RENDER_MODES:
        raise UnfoldError(f"render mode must be one of {RENDER_MODES}")
    mask = uv.mask
    hit = mask.any(axis=2)
    if mode == "mip":
        proj = np.where(mask, uv.values, -np.inf).max(axis=2)
    else:
        count = mask.sum(axis=2)
        proj = np.where(mask, uv.values, 0.0).sum(axis=2) / np.maximum(count, 1)
    img = window_transfer(np.where(hit, proj, 0.0), center, width)
    img[~hit] = 0
    return np.ascontiguousarray(img.T)


def write_pgm(image, path) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise UnfoldError("image must be 2-D")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise UnfoldError(f"{path}: not a binary P5 image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise UnfoldError(f"{path}: only maxval 255 is supported")
    pixels = raw[m.end():]
    if len(pixels) < w * h:
        raise UnfoldError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)
