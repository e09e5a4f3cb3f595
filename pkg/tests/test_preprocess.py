import numpy as np
import pytest
from scipy import ndimage

from vunfold.polyline import arc_lengths, point_to_polyline_distance
from vunfold.preprocess import (
    IncisionLine,
    PreprocessError,
    determine_incision_line,
    extract_air_region,
    extract_centerline,
    extract_wall_region,
    inner_surface_voxels,
)
from vunfold.volume import LABEL_AIR, LABEL_WALL, LabelVolume, ScalarVolume


def dice(a, b):
    return 2.0 * np.count_nonzero(a & b) / (np.count_nonzero(a) + np.count_nonzero(b))


def test_air_region_matches_phantom(straight):
    scalar, labels, truth = straight
    mid = truth.axis[len(truth.axis) // 2]
    air = extract_air_region(scalar, mid)
    assert dice(air.mask(LABEL_AIR), labels.data == LABEL_AIR) >= 0.98
    assert set(np.unique(air.data)) <= {0, LABEL_AIR}


def test_air_region_is_six_connected(straight_prepared):
    _, n = ndimage.label(straight_prepared.air.mask(LABEL_AIR), structure=ndimage.generate_binary_structure(3, 1))
    assert n == 1


def test_seed_in_wall_rejected(straight):
    scalar, labels, _ = straight
    wall_voxel = np.argwhere(labels.data == LABEL_WALL)[0]
    with pytest.raises(PreprocessError, match="not in an air-like voxel"):
        extract_air_region(scalar, wall_voxel * scalar.spacing_array)


def _two_pockets():
    data = np.full((20, 9, 9), 40, dtype=np.int16)
    data[2:8, 2:7, 2:7] = -1000
    data[12:18, 2:7, 2:7] = -1000
    return ScalarVolume(data, (1, 1, 1))


def test_disjoint_pockets():
    vol = _two_pockets()
    air = extract_air_region(vol, (4.0, 4.0, 4.0))
    mask = air.mask(LABEL_AIR)
    assert mask[2:8].any() and not mask[10:].any()


def test_unreachable_pylorus():
    vol = _two_pockets()
    air = extract_air_region(vol, (4.0, 4.0, 4.0))
    with pytest.raises(PreprocessError):
        extract_centerline(air, (4.0, 4.0, 4.0), (15.0, 4.0, 4.0))


def test_unreachable_through_air():
    # both landmarks are in the air label, but the label has two components
    mask = np.zeros((20, 9, 9), dtype=np.uint8)
    mask[2:8, 2:7, 2:7] = LABEL_AIR
    mask[12:18, 2:7, 2:7] = LABEL_AIR
    with pytest.raises(PreprocessError, match="unreachable"):
        extract_centerline(LabelVolume(mask, (1, 1, 1)), (4.0, 4.0, 4.0), (15.0, 4.0, 4.0))


def test_wall_region_matches_phantom(straight, straight_prepared):
    _, labels, _ = straight
    assert dice(straight_prepared.wall.mask(LABEL_WALL), labels.data == LABEL_WALL) >= 0.95


def test_zero_shell_is_empty_wall(straight, straight_prepared):
    scalar, _, _ = straight
    with pytest.raises(PreprocessError, match="empty wall"):
        extract_wall_region(scalar, straight_prepared.air, shell_mm=0.0)


def test_wall_clipped_at_border():
    # air box touching the x = 0 face, wall around it
    data = np.full((10, 11, 11), -1024, dtype=np.int16)
    data[0:8, 1:10, 1:10] = 40
    data[0:6, 3:8, 3:8] = -1000
    vol = ScalarVolume(data, (1, 1, 1))
    air = extract_air_region(vol, (0.0, 5.0, 5.0))
    wall = extract_wall_region(vol, air)
    assert wall.mask(LABEL_WALL).any()
    assert not np.any(wall.mask(LABEL_WALL) & air.mask(LABEL_AIR))


def test_straight_centerline_on_axis(straight, straight_prepared):
    _, labels, truth = straight
    c = straight_prepared.centerline.points
    dev = point_to_polyline_distance(c, truth.axis)
    assert dev.max() <= 1.5 * labels.spacing_array.max()


def test_centerline_invariants(jtube, jtube_prepared):
    _, labels, truth = jtube
    c = jtube_prepared.centerline.points
    steps = np.linalg.norm(np.diff(c, axis=0), axis=1)
    assert np.all(steps <= 2.0 * labels.spacing_array.max() + 1e-9)
    air = jtube_prepared.air
    idx = np.rint(c / air.spacing_array).astype(int)
    assert np.all(air.data[tuple(idx.T)] == LABEL_AIR)
    assert np.linalg.norm(c[0] - truth.cardia) < np.linalg.norm(c[-1] - truth.cardia)


def test_jtube_centerline_length(jtube, jtube_prepared):
    _, _, truth = jtube
    length = arc_lengths(jtube_prepared.centerline.points)[-1]
    analytic = truth.axis_length()
    assert abs(length - analytic) / analytic <= 0.10


def test_straight_incision_on_inner_radius(straight, straight_prepared):
    _, labels, truth = straight
    u = straight_prepared.incision.points
    radial = point_to_polyline_distance(u, truth.axis)
    # the clamped end points sit on the caps; the rest follow the inner cylinder
    inner = radial[1:-1]
    assert np.all(np.abs(inner - (20.0 - 4.0)) <= labels.spacing_array.max() + 1e-9)


def test_jtube_incision_on_outer_bend(jtube, jtube_prepared):
    _, _, truth = jtube
    u = jtube_prepared.incision.points
    r = np.linalg.norm(u[:, :2] - truth.bend_center[:2], axis=1)
    assert np.mean(r > truth.bend_radius) >= 0.9


@pytest.mark.parametrize("name", ["straight", "jtube"])
def test_incision_invariants(name, request):
    _, _, truth = request.getfixturevalue(name)
    prep = request.getfixturevalue(f"{name}_prepared")
    u = prep.incision.points
    assert len(u) % 2 == 0
    assert np.linalg.norm(u[0] - truth.cardia) <= 10.0
    assert np.linalg.norm(u[-1] - truth.pylorus) <= 10.0
    # every point lies on the inner surface: its 26-neighbourhood holds wall and air
    sp = prep.wall.spacing_array
    wall = prep.wall.mask(LABEL_WALL)
    air = prep.air.mask(LABEL_AIR)
    for p in u:
        i, j, k = np.rint(p / sp).astype(int)
        block = (slice(i - 1, i + 2), slice(j - 1, j + 2), slice(k - 1, k + 2))
        assert wall[block].any() and air[block].any()


def test_odd_incision_rejected():
    with pytest.raises(PreprocessError, match="even"):
        IncisionLine(np.zeros((3, 3)))


def test_inner_surface_touches_air(straight_prepared):
    p = straight_prepared
    surf = inner_surface_voxels(p.wall, p.air)
    near = ndimage.binary_dilation(p.air.mask(LABEL_AIR), structure=ndimage.generate_binary_structure(3, 1))
    assert np.all(near[tuple(surf.T)]) and np.all(p.wall.mask(LABEL_WALL)[tuple(surf.T)])


def test_preprocess_deterministic(straight, straight_prepared):
    scalar, _, truth = straight
    air = extract_air_region(scalar, truth.cardia)
    wall = extract_wall_region(scalar, air)
    cl = extract_centerline(air, truth.cardia, truth.pylorus)
    inc = determine_incision_line(wall, air, cl, truth.cardia, truth.pylorus)
    np.testing.assert_array_equal(cl.points, straight_prepared.centerline.points)
    np.testing.assert_array_equal(inc.points, straight_prepared.incision.points)


def test_dilated_lumen_never_costs_more():
    # centreline path cost drops (or stays) when the lumen grows
    from vunfold.preprocess import _voxel_graph
    from scipy.sparse.csgraph import dijkstra

    small = np.zeros((30, 11, 11), dtype=bool)
    small[2:28, 4:7, 4:7] = True
    big = ndimage.binary_dilation(small, iterations=2)

    def cost(mask):
        dt = ndimage.distance_transform_edt(mask)
        g, coords, _, node_of = _voxel_graph(mask, np.ones(3), lambda step, dst: step / (1.0 + dt[tuple(dst.T)]))
        return dijkstra(g, indices=node_of[(3, 5, 5)])[node_of[(26, 5, 5)]]

    assert cost(big) <= cost(small) + 1e-12
