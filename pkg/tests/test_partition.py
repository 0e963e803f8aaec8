import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pymra.dataio import ObservationSet
from pymra.errors import ConfigError, StructureError
from pymra.partition import (
    DEFAULT_OFFSET,
    BoundingBox,
    RegionId,
    actual_knots,
    build_tree,
    default_levels,
    extend_domain,
    find_knot_collisions,
    grid_shape,
    min_knot_distance,
    parse_structure_report,
    place_knots,
    region_count,
    split_region,
    structure_report,
    subtree_finest,
)

from conftest import random_observations


def unit_tree(J, M, r, n=200, seed=0, offset="default"):
    obs = random_observations(np.random.default_rng(seed), n)
    return build_tree(obs, J, r, M, offset=offset)


@pytest.mark.parametrize(
    "box,expected",
    [
        ((0, 1, 0, 1), (0, 1.01, 0, 1.01)),
        ((0, 10, 0, 2), (0, 10.1, 0, 2.02)),
        ((-1, 1, -1, 1), (-1, 1.02, -1, 1.02)),
    ],
)
def test_extend_domain(box, expected):
    out = extend_domain(BoundingBox(*box))
    np.testing.assert_allclose(out.as_tuple(), expected, rtol=1e-15, atol=0)


def test_degenerate_box_rejected():
    with pytest.raises(StructureError):
        BoundingBox(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(StructureError):
        BoundingBox.around(np.array([1.0, 1.0]), np.array([0.0, 2.0]))


def test_split_along_longer_y():
    kids = split_region(BoundingBox(0, 1, 0, 2), 2)
    assert [k.as_tuple() for k in kids] == [(0, 1, 0, 1), (0, 1, 1, 2)]


def test_split_quadrants():
    kids = split_region(BoundingBox(0, 2, 0, 2), 4)
    assert [k.as_tuple() for k in kids] == [(0, 1, 0, 1), (1, 2, 0, 1), (0, 1, 1, 2), (1, 2, 1, 2)]


def test_split_along_longer_x():
    kids = split_region(BoundingBox(0, 2, 0, 1), 2)
    assert [k.as_tuple() for k in kids] == [(0, 1, 0, 1), (1, 2, 0, 1)]


def test_square_split_ties_go_to_x():
    kids = split_region(BoundingBox(0, 1, 0, 1), 2)
    assert kids[0].x_max == 0.5 and kids[0].y_max == 1


def test_split_rejects_other_j():
    with pytest.raises(ConfigError):
        split_region(BoundingBox(0, 1, 0, 1), 3)


box_strategy = st.tuples(
    st.floats(-100, 100), st.floats(0.01, 50), st.floats(-100, 100), st.floats(0.01, 50)
).map(lambda t: BoundingBox(t[0], t[0] + t[1], t[2], t[2] + t[3]))


@settings(max_examples=60, deadline=None)
@given(box_strategy, st.sampled_from([2, 4]), st.integers(0, 10_000))
def test_children_tile_parent(box, J, seed):
    kids = split_region(box, J)
    assert sum(k.area for k in kids) == pytest.approx(box.area, rel=1e-12)
    rng = np.random.default_rng(seed)
    x = rng.uniform(box.x_min, box.x_max, 200)
    y = rng.uniform(box.y_min, box.y_max, 200)
    inside = np.vstack([k.contains(x, y) for k in kids])
    assert np.all(inside.sum(axis=0) == 1)


def test_point_on_shared_boundary_belongs_to_one_child():
    kids = split_region(BoundingBox(0, 2, 0, 2), 4)
    hits = [bool(k.contains(1.0, 1.0)) for k in kids]
    assert hits == [False, False, False, True]
    hits = [bool(k.contains(1.0, 0.5)) for k in kids]
    assert hits == [False, True, False, False]


def test_knots_worked_example():
    Q = place_knots(BoundingBox(0, 1, 0, 1), 32, 0.1)
    assert len(Q) == 30
    np.testing.assert_allclose(np.unique(Q[:, 0]), [0.1, 0.26, 0.42, 0.58, 0.74, 0.9], atol=1e-15)
    np.testing.assert_allclose(np.unique(Q[:, 1]), [0.1, 0.3, 0.5, 0.7, 0.9], atol=1e-15)
    # y-major ordering: x varies fastest
    assert Q[1, 1] == Q[0, 1] and Q[1, 0] > Q[0, 0]


def test_four_knots_form_two_by_two_grid():
    assert grid_shape(4) == (2, 2)
    assert len(place_knots(BoundingBox(0, 1, 0, 1), 4, 0.2)) == 4


def test_two_knots_use_midpoint_in_y():
    Q = place_knots(BoundingBox(0, 4, 0, 2), 2, 0.25)
    np.testing.assert_allclose(Q, [[1.0, 1.0], [3.0, 1.0]])


def test_zero_knots_rejected():
    with pytest.raises(ConfigError):
        place_knots(BoundingBox(0, 1, 0, 1), 0, 0.1)


@pytest.mark.parametrize(
    "r,r_hat", [(512, 506), (256, 256), (128, 120), (64, 64), (32, 30), (16, 16), (8, 6), (4, 4), (2, 2)]
)
def test_knot_count_mapping(r, r_hat):
    nx = math.ceil(math.sqrt(r))
    assert actual_knots(r) == r_hat == nx * (r // nx)


@settings(max_examples=60, deadline=None)
@given(box_strategy, st.integers(1, 80), st.floats(0.01, 0.49), st.floats(-5, 5), st.floats(0.1, 10))
def test_knots_transform_affinely(box, r, offset, shift, scale):
    Q = place_knots(box, r, offset)
    moved = BoundingBox(
        box.x_min * scale + shift, box.x_max * scale + shift, box.y_min * scale + shift, box.y_max * scale + shift
    )
    np.testing.assert_allclose(place_knots(moved, r, offset), Q * scale + shift, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("n,J,r,M", [(105_569, 2, 256, 10), (100, 2, 100, 1), (1000, 4, 49, 4)])
def test_default_levels(n, J, r, M):
    assert default_levels(n, J, r) == M


@pytest.mark.parametrize("J,M,total,finest", [(2, 10, 1023, 512), (2, 14, 16_383, 8_192)])
def test_published_region_counts(J, M, total, finest):
    tree = unit_tree(J, M, 4, n=50)
    assert tree.n_regions == total
    assert tree.n_finest == finest


@pytest.mark.parametrize("J", [2, 4])
@pytest.mark.parametrize("M", [1, 2, 3, 5])
def test_region_count_formula(J, M):
    tree = unit_tree(J, M, 9, n=100)
    assert tree.n_regions == region_count(J, M) == (J**M - 1) // (J - 1)
    assert tree.n_finest == J ** (M - 1)


def test_single_level_tree_holds_everything():
    obs = random_observations(np.random.default_rng(1), 37)
    tree = build_tree(obs, 2, 9, 1)
    assert tree.n_regions == 1
    assert sorted(tree.obs_index[0].tolist()) == list(range(37))
    np.testing.assert_array_equal(tree.knots[0][:, 0], obs.lon[tree.obs_index[0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 400), st.sampled_from([2, 4]), st.integers(1, 4), st.integers(1, 25), st.integers(0, 9999))
def test_every_observation_in_exactly_one_finest_region(n, J, M, r, seed):
    obs = random_observations(np.random.default_rng(seed), n)
    tree = build_tree(obs, J, r, M)
    idx = np.concatenate([tree.retained_index, tree.eliminated])
    assert sorted(idx.tolist()) == list(range(n))
    for k, f in enumerate(tree.finest):
        ix = tree.obs_index[k]
        assert np.all(tree.box(f).contains(obs.lon[ix], obs.lat[ix]))
    # the knots of pre-finest regions all have r_hat points inside the box
    for i in range(tree.n_regions):
        if tree.level[i] < tree.M:
            assert tree.n_knots(i) == tree.r_hat


def test_children_order_and_tiling_in_tree():
    tree = unit_tree(4, 3, 4)
    for i in range(tree.n_regions):
        if tree.level[i] < tree.M:
            kids = [tree.box(c) for c in tree.children[i]]
            assert [k.as_tuple() for k in kids] == [k.as_tuple() for k in split_region(tree.box(i), 4)]


def test_observation_on_knot_is_eliminated():
    rng = np.random.default_rng(3)
    obs = random_observations(rng, 100)
    probe = build_tree(obs, 2, 4, 2)
    k = probe.knots[0][2]
    lon = np.append(obs.lon, k[0])
    lat = np.append(obs.lat, k[1])
    val = np.append(obs.value, 1.0)
    tree = build_tree(ObservationSet(lon, lat, val), 2, 4, 2)
    assert tree.eliminated.tolist() == [100]
    assert tree.n_obs == 100


def test_nan_rows_are_not_knots():
    obs = random_observations(np.random.default_rng(4), 30)
    obs.value[:5] = np.nan
    tree = build_tree(obs, 2, 4, 2)
    assert tree.n_obs == 25
    assert not set(tree.retained_index.tolist()) & set(range(5))


def test_all_eliminated_is_structural_error():
    Q = place_knots(extend_domain(BoundingBox(0, 1, 0, 1)), 4, DEFAULT_OFFSET)
    lon = np.concatenate([Q[:, 0], [0.0, 1.0]])
    lat = np.concatenate([Q[:, 1], [0.0, 1.0]])
    val = np.concatenate([np.ones(4), [np.nan, np.nan]])
    with pytest.raises(StructureError):
        build_tree(ObservationSet(lon, lat, val), 2, 4, 2)


def test_build_tree_config_errors():
    obs = random_observations(np.random.default_rng(0), 10)
    with pytest.raises(ConfigError):
        build_tree(obs, 3, 4, 2)
    with pytest.raises(ConfigError):
        build_tree(obs, 2, 0, 2)
    with pytest.raises(ConfigError):
        build_tree(obs, 2, 4, 0)


def test_default_offset_is_e_over_100():
    tree = unit_tree(2, 2, 4)
    assert tree.offset == math.e / 100


@pytest.mark.parametrize("J", [2, 4])
@pytest.mark.parametrize("M", [3, 5, 8])
@pytest.mark.parametrize("r", [4, 9, 30, 64])
def test_no_knot_collisions_with_default_offset(J, M, r):
    tree = unit_tree(J, M, r, n=20)
    assert find_knot_collisions(tree) == []
    assert min_knot_distance(tree) > 0


def test_rational_offset_produces_collision():
    # offset 1/4 with a 3x3 grid puts a knot on the midline of each region,
    # which is exactly where a child's first bar lands one level down.
    obs = ObservationSet(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.zeros(2))
    tree = build_tree(obs, 2, 9, 3, offset=0.25)
    hits = find_knot_collisions(tree)
    assert hits
    owners = {tree.level[a] for a, b, _ in hits} | {tree.level[b] for a, b, _ in hits}
    assert len(owners) >= 2


def test_region_id_formatting():
    rid = RegionId(3, (2, 1))
    assert str(rid) == "1-2-1"
    with pytest.raises(ValueError):
        RegionId(2, ())


def test_locate_agrees_with_boxes(rng):
    tree = unit_tree(2, 5, 4)
    d = tree.domain
    pts = np.column_stack([rng.uniform(d.x_min, d.x_max, 500), rng.uniform(d.y_min, d.y_max, 500)])
    pos = tree.locate(pts[:, 0], pts[:, 1])
    for (x, y), k in zip(pts, pos):
        assert tree.box(tree.finest[k]).contains(x, y)
    assert tree.locate([d.x_max], [d.y_min])[0] == -1


def test_subtree_finest_is_contiguous():
    tree = unit_tree(2, 4, 4)
    assert list(subtree_finest(tree, 0)) == list(range(8))
    assert list(subtree_finest(tree, int(tree.children[0, 1]))) == [4, 5, 6, 7]


def test_structure_report_toy(tmp_path):
    tree = unit_tree(2, 3, 32)
    rep = parse_structure_report(structure_report(tree, tmp_path / "structure_information.txt"))
    assert rep["total_regions"] == "7"
    assert len(rep["regions"]) == 7
    assert rep["r"] == "32" and rep["r_hat"] == "30"
    assert [reg["path"] for reg in rep["regions"]][:3] == ["1", "1-1", "1-1-1"]
    finest = [reg for reg in rep["regions"] if reg["level"] == 3]
    assert sum(reg["observations"] for reg in finest) == tree.n_obs


def test_structure_report_lists_empty_regions(tmp_path):
    # all points in one corner leave most finest regions empty
    obs = ObservationSet(np.array([0.0, 0.01, 0.02, 1.0]), np.array([0.0, 0.01, 0.02, 1.0]), np.ones(4))
    tree = build_tree(obs, 2, 4, 4)
    rep = parse_structure_report(structure_report(tree, tmp_path / "s.txt"))
    counts = [reg["observations"] for reg in rep["regions"] if reg["level"] == 4]
    assert 0 in counts
    assert int(rep["empty_finest_regions"]) == counts.count(0)
    assert int(rep["observations_eliminated"]) == len(tree.eliminated)


def test_single_location_has_degenerate_domain():
    with pytest.raises(StructureError):
        build_tree(ObservationSet(np.array([0.5]), np.array([0.5]), np.array([1.0])), 2, 4, 1)
