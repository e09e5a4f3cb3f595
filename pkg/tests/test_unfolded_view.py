import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from vunfold.geometry import UnfoldPlane
from vunfold.unfolded_view import (
    UnfoldError,
    UnfoldedGrid,
    UnfoldedVolume,
    bending_rms,
    broken_fraction,
    build_unfolded_grid,
    center_jacobian,
    defect_metrics,
    invert_trilinear,
    read_pgm,
    render_view,
    resample_unfolded,
    sheet_width,
    trilinear_map,
    window_transfer,
    write_pgm,
)
from vunfold.volume import BACKGROUND, ScalarVolume
from vunfold.wall_model import model_from_cells

Z_PLANE = UnfoldPlane(np.array([0.0, 0, 1]), np.zeros(3), np.zeros(3), 0)
X, Y = np.array([1.0, 0, 0]), np.array([0.0, 1, 0])


def world_grid(positions, spacing, margin=0.0):
    return build_unfolded_grid(Z_PLANE, positions, spacing, margin, v1=X, v2=Y)


@pytest.fixture(scope="module")
def identity(straight, straight_model):
    scalar, _, _ = straight
    m = straight_model
    grid = world_grid(m.rest, scalar.spacing)
    return resample_unfolded(scalar, m.hexes, m.rest, m.rest, grid)


def test_grid_bounding_box():
    pts = np.array([(0, 0, 0), (100, 0, 0), (0, 60, 0), (37, 12, 0)], float)
    g = world_grid(pts, (1.0, 1.0, 1.0), margin=5.0)
    assert np.allclose(g.origin, (-5, -5, 0))
    assert g.dims == (111, 71, 1)
    assert np.allclose(g.index_to_world(np.array(g.dims) - 1), (105, 65, 0))


def test_grid_single_vertex():
    g = world_grid(np.array([[3.0, 4.0, 5.0]]), (0.7, 0.7, 1.0))
    assert g.dims == (1, 1, 1) and np.allclose(g.origin, (3, 4, 5))


def test_grid_rejects_exploded_positions():
    with pytest.raises(UnfoldError, match="exceeds"):
        world_grid(np.array([[0.0, 0, 0], [1e6, 1e6, 0]]), (1, 1, 1))
    with pytest.raises(UnfoldError, match="finite"):
        world_grid(np.array([[0.0, 0, 0], [np.nan, 0, 0]]), (1, 1, 1))


def test_grid_axes_orthonormal():
    n = np.array([1.0, 2.0, 2.0]) / 3.0
    plane = UnfoldPlane(n, np.zeros(3), np.zeros(3), 0)
    g = build_unfolded_grid(plane, np.random.default_rng(0).normal(size=(20, 3)), (1, 1, 1))
    assert np.allclose(g.axes @ g.axes.T, np.eye(3), atol=1e-12)
    assert np.allclose(g.axes[2], n)
    with pytest.raises(UnfoldError):
        build_unfolded_grid(plane, np.zeros((0, 3)), (1, 1, 1))


def test_world_index_round_trip():
    g = UnfoldedGrid(np.array([1.0, -2, 3]), np.eye(3)[[1, 2, 0]], np.array([0.5, 1.0, 2.0]), (4, 5, 6))
    idx = np.array([[0, 0, 0], [3, 4, 5], [1.5, 2, 0.25]])
    assert np.allclose(g.world_to_index(g.index_to_world(idx)), idx)


def test_identity_matches_direct_sampling(straight, identity):
    scalar, _, _ = straight
    uv = identity
    q = uv.grid.voxel_centers()[uv.mask]
    direct = ndimage.map_coordinates(scalar.data.astype(float), (q / scalar.spacing_array).T, order=1,
                                     mode="constant", cval=BACKGROUND)
    assert uv.mask.sum() > 10_000
    assert np.max(np.abs(uv.values[uv.mask] - direct)) <= 1e-6
    assert np.all(uv.values[~uv.mask] == BACKGROUND)


def test_identity_has_no_defects(identity):
    assert identity.overlap_fraction == 0.0
    assert broken_fraction(identity) == 0.0
    assert identity.diagnostics["degenerate_hexahedra"] == 0


def test_identity_mask_is_the_model_volume(straight_model, identity):
    m = straight_model
    rel = (identity.grid.voxel_centers() - m.rest.min(axis=0)) / m.cell_size
    present = np.zeros(tuple(m.hex_cell.max(axis=0) - m.hex_cell.min(axis=0) + 3), bool)
    present[tuple((m.hex_cell - m.hex_cell.min(axis=0) + 1).T)] = True
    inside = np.zeros(identity.mask.shape, bool)
    # a voxel centre on a cell face belongs to the cells on both sides, per axis
    below = np.stack([np.floor(rel), np.ceil(rel) - 1]).astype(int) + 1
    for pick in np.ndindex(2, 2, 2):
        cell = [np.clip(below[pick[a], ..., a], 0, present.shape[a] - 1) for a in range(3)]
        inside |= present[tuple(cell)]
    assert np.array_equal(identity.mask, inside)


def test_translation_equivariance(straight, straight_model, identity):
    scalar, _, _ = straight
    m = straight_model
    t = np.array([16.0, -8.0, 4.0])
    grid = world_grid(m.rest + t, scalar.spacing)
    moved = resample_unfolded(scalar, m.hexes, m.rest, m.rest + t, grid)
    assert np.array_equal(moved.mask, identity.mask)
    assert np.array_equal(moved.values, identity.values)


def test_overlap_is_detected_and_lowest_id_wins():
    m = model_from_cells([(1, 1, 1), (3, 1, 1)], d=2)  # two separate boxes, x in [1, 3] and [5, 7]
    src = ScalarVolume(np.arange(10 * 8 * 8).reshape(10, 8, 8), (1.0, 1.0, 1.0))
    pos = m.rest.copy()
    pos[np.unique(m.hexes[1])] -= (3.0, 0, 0)  # the second box now spans x in [2, 4]
    grid = world_grid(pos, (0.5, 0.5, 0.5))
    uv = resample_unfolded(src, m.hexes, m.rest, pos, grid)
    assert 0 < uv.overlap_fraction <= 1
    c = tuple(grid.world_to_index(np.array([[2.5, 2.0, 2.0]]))[0].round().astype(int))
    assert uv.hex_id[c] == 0
    assert uv.values[c] == pytest.approx(src.data[2, 2, 2] + 0.5 * (src.data[3, 2, 2] - src.data[2, 2, 2]))


def test_degenerate_hexahedra_are_skipped():
    m = model_from_cells([(1, 1, 1), (2, 1, 1)], d=2)
    src = ScalarVolume(np.zeros((8, 8, 8)), (1.0, 1.0, 1.0))
    pos = m.rest.copy()
    h1 = m.hexes[1]
    far = m.vertex_lattice[h1, 0] == 3
    pos[h1[far]] -= (4.0, 0, 0)  # turn the second cell inside out
    assert center_jacobian(pos[m.hexes])[1] < 0
    uv = resample_unfolded(src, m.hexes, m.rest, pos, world_grid(pos, (1, 1, 1)))
    assert uv.diagnostics["degenerate_hexahedra"] == 1
    assert not np.any(uv.hex_id == 1)


def test_round_trip_correspondence(straight_unfolded):
    res = straight_unfolded
    uv = res.unfolded
    pos = res.run.state.positions
    idx = np.argwhere(uv.mask)
    idx = idx[np.random.default_rng(1).choice(len(idx), size=min(5000, len(idx)), replace=False)]
    q = uv.grid.index_to_world(idx)
    corners = pos[res.model.hexes[uv.hex_id[tuple(idx.T)]]]
    xi, ok = invert_trilinear(corners, q)
    assert ok.all()
    assert np.max(np.linalg.norm(trilinear_map(corners, xi) - q, axis=1)) <= 1e-5


def test_defect_metrics_ranges(straight_unfolded):
    m = straight_unfolded.metrics
    for key in ("overlap_fraction", "broken_fraction", "wall_like_fraction"):
        assert 0.0 <= m[key] <= 1.0
    assert m["bending_rms"] >= 0.0


@pytest.mark.xfail(strict=True, reason="the default unfolding keeps lumen air inside the sheet bounds")
def test_wall_like_fraction_after_unfolding(straight_unfolded):
    assert straight_unfolded.metrics["wall_like_fraction"] >= 0.9


def flat_sheet(value=40.0, nz=4):
    g = UnfoldedGrid(np.array([0.0, 0, -1.5]), np.eye(3), np.ones(3), (6, 5, nz))
    mask = np.zeros(g.dims, bool)
    mask[1:5, 1:4, :] = True
    return UnfoldedVolume(np.where(mask, value, BACKGROUND), mask, g)


def test_flat_sheet_metrics():
    uv = flat_sheet()
    assert bending_rms(uv, Z_PLANE) == 0.0
    assert sheet_width(uv, (2.0, 0, 0)) == 3.0
    assert sheet_width(uv, (50.0, 0, 0)) == 0.0
    assert defect_metrics(uv, Z_PLANE)["broken_fraction"] == 0.0
    uv.mask[2, 2, :] = False
    assert broken_fraction(uv) > 0


def test_window_example():
    img = render_view(flat_sheet(40.0), 40.0, 400.0)
    assert set(np.unique(img[flat_sheet().mask.any(axis=2).T])) == {128}
    assert window_transfer([-160.0, 240.0, -1000.0, 1000.0], 40, 400).tolist() == [0, 255, 0, 255]


def test_empty_mask_is_black():
    uv = flat_sheet()
    uv.mask[:] = False
    for mode in ("mip", "slab-average"):
        assert not render_view(uv, mode=mode).any()


def test_render_errors():
    with pytest.raises(UnfoldError, match="width"):
        render_view(flat_sheet(), 40.0, 0.0)
    with pytest.raises(UnfoldError, match="mode"):
        render_view(flat_sheet(), mode="shaded")


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3, 5), elements=st.floats(-1200, 1200)), arrays(np.bool_, (4, 3, 5)))
def test_mip_dominates_average(values, mask):
    g = UnfoldedGrid(np.zeros(3), np.eye(3), np.ones(3), values.shape)
    uv = UnfoldedVolume(np.where(mask, values, BACKGROUND), mask, g)
    assert np.all(render_view(uv, mode="mip") >= render_view(uv, mode="slab-average"))


def test_pgm_round_trip(tmp_path):
    img = np.arange(35, dtype=np.uint8).reshape(5, 7)
    write_pgm(img, tmp_path / "a.pgm")
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n") and len(raw) == len(b"P5\n7 5\n255\n") + 35
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "b.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(UnfoldError):
        read_pgm(tmp_path / "b.pgm")


def test_render_is_deterministic(straight_unfolded):
    uv = straight_unfolded.unfolded.quantized()
    assert render_view(uv).tobytes() == render_view(uv).tobytes()


def test_saved_volume_re_renders_identically(tmp_path, straight_unfolded):
    res = straight_unfolded
    res.unfolded.save(tmp_path / "u.gvol", tmp_path / "m.gvol")
    back = UnfoldedVolume.load(tmp_path / "u.gvol", tmp_path / "m.gvol")
    assert np.array_equal(back.mask, res.unfolded.mask)
    assert np.array_equal(render_view(back), res.image)
