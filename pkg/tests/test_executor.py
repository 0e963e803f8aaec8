import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pymra import core
from pymra.errors import NumericalError
from pymra.dataio import ObservationSet
from pymra.executor import (
    LanePool,
    TransportError,
    assign_dynamic,
    assign_static,
    estimate_memory,
    get_transport,
    make_assignment,
    plan_merges,
    range_loads,
    run_parallel,
    working_set,
)
from pymra.kernel import CovarianceParams
from pymra.partition import build_tree

from conftest import inside_queries, random_instance, random_observations


def region_at(tree, path):
    return tree.paths.index(tuple(path))


@pytest.fixture
def toy(rng):
    """J=2, M=4: eight finest regions split 3/3/2 over three workers."""
    obs = random_observations(rng, 120)
    tree = build_tree(obs, 2, 4, 4)
    prm = CovarianceParams(1.0, 0.3, 0.1)
    return obs, tree, prm


# --- assignment -------------------------------------------------------------


def test_static_sizes_for_toy():
    assert [len(rg) for rg in assign_static(8, 3)] == [3, 3, 2]


@pytest.mark.parametrize("q,p", [(q, p) for q in range(0, 65, 7) for p in range(1, 17, 3)])
def test_static_ranges_are_contiguous_and_balanced(q, p):
    ranges = assign_static(q, p)
    assert len(ranges) == p
    assert [k for rg in ranges for k in rg] == list(range(q))
    sizes = [len(rg) for rg in ranges]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def test_dynamic_cut_balances_squared_counts():
    ranges = assign_dynamic([4, 1, 1, 4], 2)
    assert [list(rg) for rg in ranges] == [[0, 1], [2, 3]]
    assert range_loads(ranges, [4, 1, 1, 4]).tolist() == [17, 17]


def test_dynamic_equals_static_for_uniform_counts():
    for q, p in [(8, 2), (12, 3), (16, 4), (64, 8)]:
        assert assign_dynamic([5] * q, p) == assign_static(q, p)


def test_dynamic_with_empty_regions():
    ranges = assign_dynamic([10, 0, 0, 0], 2)
    assert [list(rg) for rg in ranges] == [[0], [1, 2, 3]]
    assert range_loads(ranges, [10, 0, 0, 0]).tolist() == [100, 0]


def test_more_workers_than_regions_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ranges = assign_static(2, 4)
    assert [len(rg) for rg in ranges] == [1, 1, 0, 0]
    assert "idle" in caplog.text


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.floats(0.3, 0.95), st.integers(8, 64), st.integers(2, 8))
def test_dynamic_never_loses_to_static_on_geometric_counts(base, ratio, q, p):
    counts = np.floor(base * ratio ** np.arange(q)).astype(int)
    dyn = range_loads(assign_dynamic(counts, p), counts).max()
    sta = range_loads(assign_static(q, p), counts).max()
    assert dyn <= sta


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=64), st.integers(1, 16))
def test_dynamic_ranges_cover_in_order(counts, p):
    ranges = assign_dynamic(counts, p)
    assert len(ranges) == p
    assert [k for rg in ranges for k in rg] == list(range(len(counts)))


# --- working sets and merge plan --------------------------------------------


def test_toy_working_sets(toy):
    _, tree, _ = toy
    ranges = assign_static(tree.n_finest, 3)
    sets = working_set(ranges, tree)
    for w, rg in enumerate(ranges):
        finest = {int(tree.finest[k]) for k in rg}
        assert finest <= sets[w]
        assert 0 in sets[w]
    # finest 0..2 sit under two level-3 regions and one level-2 region
    assert len(sets[0]) - 3 == 4
    # finest 3..5 straddle both halves, so they reach five ancestors including the root
    assert len(sets[1]) - 3 == 5
    assert len(sets[2]) - 2 == 3


def test_working_set_is_ancestor_closure(rng):
    _, tree, _ = random_instance(rng, 300, 4, 4, 4)
    ranges = assign_static(tree.n_finest, 5)
    for w, s in enumerate(working_set(ranges, tree)):
        expect = set()
        for k in ranges[w]:
            expect.update(tree.ancestors(int(tree.finest[k])))
        assert s == expect


def test_toy_merge_plan(toy):
    _, tree, _ = toy
    plan = plan_merges(assign_static(tree.n_finest, 3), tree)
    expect = {
        (1, 2): (0, (1,)),
        (2, 1): (1, ()),
        (2, 2): (2, ()),
        (1, 1): (0, ()),
        (1,): (0, ()),
        (2,): (1, (2,)),
        (): (0, (1,)),
    }
    for path, (sup, contrib) in expect.items():
        i = region_at(tree, path)
        assert plan.supervisor[i] == sup and plan.contributors[i] == contrib, path


def test_contributors_drop_merged_regions(toy):
    _, tree, _ = toy
    plan = plan_merges(assign_static(tree.n_finest, 3), tree)
    merged = region_at(tree, (1, 2))
    assert merged in plan.working[1]
    assert merged not in plan.ascending_working(1, tree, 3)
    assert merged in plan.ascending_working(0, tree, 3)
    # worker 2 keeps nothing at level 2 or above once the right half merges into worker 1
    assert plan.ascending_working(2, tree, 2) == []
    assert plan.ascending_working(2, tree, 1) == []


@pytest.mark.parametrize("J,M,p,dynamic", [(2, 4, 3, False), (4, 3, 5, False), (2, 6, 7, True), (4, 4, 16, True)])
def test_children_counted_exactly_once(rng, J, M, p, dynamic):
    _, tree, _ = random_instance(rng, 400, J, M, 4)
    plan = make_assignment(tree, p, dynamic)
    for m in range(1, M):
        for i in tree.by_level[m]:
            holders = [int(plan.holder[c]) for c in tree.children[i]]
            owners = (int(plan.supervisor[i]),) + plan.contributors[int(i)]
            assert sum(holders.count(w) for w in owners) == J
            assert len(set(owners)) == len(owners)


def test_toy_run_merges_where_planned(toy):
    obs, tree, prm = toy
    res = run_parallel("likelihood", tree, prm, obs.value, p=3)
    got = {(w, tree.paths[i], role) for w, ev in enumerate(res.merge_events) for _, i, role in ev}
    assert got == {
        (0, (1, 2), "supervisor"),
        (1, (1, 2), "contributor"),
        (1, (2,), "supervisor"),
        (2, (2,), "contributor"),
        (0, (), "supervisor"),
        (1, (), "contributor"),
    }


@pytest.mark.parametrize("p,dynamic", [(1, False), (3, False), (4, True), (8, True)])
def test_each_region_processed_once(rng, p, dynamic):
    obs, tree, prm = random_instance(rng, 500, 2, 5, 9)
    res = run_parallel("likelihood", tree, prm, obs.value, p=p, dynamic=dynamic)
    seen = [i for lst in res.processed for i in lst]
    assert sorted(seen) == list(range(tree.n_regions))


# --- parallel execution -----------------------------------------------------


@pytest.mark.parametrize("transport", ["thread", "process"])
@pytest.mark.parametrize("p", [1, 2, 3, 4, 8])
@pytest.mark.parametrize("dynamic", [False, True])
def test_parallel_matches_serial(rng, transport, p, dynamic):
    obs, tree, prm = random_instance(rng, 600, 2, 5, 9)
    serial = core.loglikelihood(tree, prm, obs.value)
    res = run_parallel("likelihood", tree, prm, obs.value, p=p, dynamic=dynamic, transport=transport, lanes=2)
    assert res.loglik == pytest.approx(serial, rel=1e-10)


def test_single_worker_is_bitwise_serial(rng):
    obs, tree, prm = random_instance(rng, 400, 4, 4, 9)
    assert run_parallel("likelihood", tree, prm, obs.value, p=1).loglik == core.loglikelihood(tree, prm, obs.value)


def test_more_workers_than_finest_regions(rng):
    obs, tree, prm = random_instance(rng, 60, 2, 2, 9)
    res = run_parallel("likelihood", tree, prm, obs.value, p=4)
    assert res.loglik == pytest.approx(core.loglikelihood(tree, prm, obs.value), rel=1e-10)


@pytest.mark.parametrize("p,dynamic", [(1, False), (3, True), (5, False)])
def test_parallel_predictions_partition_queries(rng, p, dynamic):
    obs, tree, prm = random_instance(rng, 400, 2, 4, 9)
    Q = np.vstack([inside_queries(tree, rng, 40), [[9.0, 9.0]]])
    res = run_parallel("prediction", tree, prm, obs.value, p=p, dynamic=dynamic, locations=Q)
    idx = np.concatenate([wp.index for wp in res.predictions])
    assert sorted(idx.tolist()) == list(range(len(Q)))
    mean, var = res.gathered_predictions(len(Q))
    m_ref, v_ref = core.predict(tree, prm, obs.value, Q)
    np.testing.assert_allclose(mean, m_ref, rtol=1e-10, atol=1e-12, equal_nan=True)
    np.testing.assert_allclose(var, v_ref, rtol=1e-10, atol=1e-12, equal_nan=True)
    plan = make_assignment(tree, p, dynamic)
    pos = tree.locate(Q[:, 0], Q[:, 1])
    for w, wp in enumerate(res.predictions):
        for q in wp.index:
            assert pos[q] in plan.ranges[w] or (pos[q] < 0 and w == 0)


def test_parallel_spill_is_bitwise_identical(rng, tmp_path):
    obs, tree, prm = random_instance(rng, 500, 2, 5, 9)
    a = run_parallel("likelihood", tree, prm, obs.value, p=3).loglik
    b = run_parallel("likelihood", tree, prm, obs.value, p=3, spill_dir=tmp_path).loglik
    assert a == b


def test_unknown_mode_is_rejected(rng):
    obs, tree, prm = random_instance(rng, 50, 2, 2, 4)
    with pytest.raises(ValueError, match="mode"):
        run_parallel("simulate", tree, prm, obs.value)


@pytest.mark.parametrize("transport", ["thread", "process"])
def test_worker_errors_keep_their_type(transport):
    lon = np.array([0.1, 0.1, 0.8, 0.3, 0.6, 0.9])
    lat = np.array([0.2, 0.2, 0.9, 0.6, 0.1, 0.4])
    tree = build_tree(ObservationSet(lon, lat, np.ones(6)), 2, 1, 3)
    prm = CovarianceParams(1.0, 0.5, 0.0)
    with pytest.raises(NumericalError):
        run_parallel("likelihood", tree, prm, np.ones(6), p=2, transport=transport)


def test_unknown_transport():
    with pytest.raises(ValueError, match="transport"):
        get_transport("mpi")


def test_transport_delivers_in_order_per_pair():
    def fn(ep):
        if ep.rank == 1:
            for k in range(20):
                ep.send(0, "x", k)
            ep.send(0, "y", "done")
            return None
        first = ep.recv(1, "y")
        return first, [ep.recv(1, "x") for _ in range(20)]

    out = get_transport("thread").run(2, fn)
    assert out[0] == ("done", list(range(20)))


def test_failed_peer_aborts_waiting_worker():
    def fn(ep):
        if ep.rank == 1:
            raise KeyError("boom")
        return ep.recv(1, "never")

    with pytest.raises(KeyError):
        get_transport("thread").run(2, fn)
    with pytest.raises(TransportError):
        get_transport("thread").run(1, lambda ep: ep.send(3, "x", 1))


@pytest.mark.parametrize("dynamic", [False, True])
@pytest.mark.parametrize("lanes", [1, 3, 8])
def test_lane_pool_keeps_order(dynamic, lanes):
    with LanePool(lanes, dynamic) as pool:
        assert pool.map(lambda x: x * x, range(25)) == [x * x for x in range(25)]
        assert pool.map(str, []) == []


# --- memory ------------------------------------------------------------------


def test_memory_estimate_examples():
    assert estimate_memory(2, 14, 49) == pytest.approx(8192 * 182 * 2401 / 2**28)
    assert round(estimate_memory(2, 14, 49), 2) == 13.34
    assert estimate_memory(2, 10, 256) == 11.25
    assert estimate_memory(4, 1, 64) == 0


@pytest.mark.parametrize("p", [1, 4])
def test_peak_residency_within_estimate(rng, p):
    obs = random_observations(rng, 32 * 16)
    tree = build_tree(obs, 2, 16, 6)
    prm = CovarianceParams(1.0, 0.2, 0.1)
    res = run_parallel("likelihood", tree, prm, obs.value, p=p)
    bound = estimate_memory(tree.J, tree.M, tree.r_hat) * 2**30
    assert 0 < max(res.peak_atilde_bytes) <= bound
