import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mposim.kernel import (Coordinate, allocate_replicas, build_catalog, distance, make_churn,
                           make_rng, place_nodes, region_label, sample_query_file,
                           sample_query_files, zipf_weights)


def test_rng_repeatable():
    a = make_rng(42).random(2)
    b = make_rng(42).random(2)
    assert np.array_equal(a, b)


def test_rng_seeds_and_streams_differ():
    assert not np.array_equal(make_rng(1).random(8), make_rng(2).random(8))
    assert not np.array_equal(make_rng(1, "catalog").random(8), make_rng(1, "workload").random(8))
    assert np.array_equal(make_rng(1, "catalog").random(8), make_rng(1, "catalog").random(8))


def test_rng_seed_zero_not_degenerate():
    draws = make_rng(0).integers(0, 2**32, size=1000)
    assert len(set(draws.tolist())) >= 2


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_rng_rejects_bad_seed(seed):
    with pytest.raises(ValueError):
        make_rng(seed)


def test_place_nodes_bounds_and_determinism():
    pts = place_nodes(500, make_rng(3), spread=1000)
    assert len(pts) == 500
    assert all(-1000 <= p.x <= 1000 and -1000 <= p.y <= 1000 for p in pts)
    assert place_nodes(100, make_rng(9)) == place_nodes(100, make_rng(9))
    (one,) = place_nodes(1, make_rng(0))
    assert math.isfinite(one.x) and math.isfinite(one.y)


def test_place_nodes_errors():
    with pytest.raises(ValueError):
        place_nodes(0, make_rng(0))
    with pytest.raises(ValueError):
        place_nodes(5, make_rng(0), spread=0)
    with pytest.raises(ValueError):
        Coordinate(float("nan"), 0.0)


def test_distance_examples():
    assert distance(Coordinate(0, 0), Coordinate(0, 0)) == 0
    assert distance(Coordinate(0, 0), Coordinate(3, 4)) == 5


coords = st.builds(Coordinate, st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))


@given(coords, coords, coords)
def test_distance_is_a_metric(a, b, c):
    assert distance(a, b) == distance(b, a) >= 0
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-6


def test_region_label_quadrants():
    assert region_label(Coordinate(-500, -500), 1000) == 0
    assert region_label(Coordinate(500, -500), 1000) == 1
    assert region_label(Coordinate(-500, 500), 1000) == 2
    assert region_label(Coordinate(1000, 1000), 1000) == 3


def test_zipf_ratio():
    q = zipf_weights(300, 0.726)
    assert q.sum() == pytest.approx(1.0, abs=1e-12)
    assert q[0] / q[1] == pytest.approx(2 ** 0.726, rel=1e-12)
    assert q[0] / q[1] == pytest.approx(1.654, abs=5e-4)


def test_catalog_total_and_single_file():
    cat = build_catalog(300, 0.726, 4162, list(range(2000)), make_rng(0))
    assert cat.total_replicas == 4162
    assert sum(len(h) for h in cat.placement.values()) == 4162
    one = build_catalog(1, 1.3, 17, list(range(40)), make_rng(0))
    assert one.query_weights[0] == 1.0 and one.replica_counts[0] == 17


def test_catalog_copies_on_distinct_hosts():
    cat = build_catalog(50, 0.8, 400, list(range(100)), make_rng(5))
    for hosts in cat.placement.values():
        assert len(hosts) == len(set(hosts))


@given(st.integers(1, 200), st.floats(0.0, 2.5), st.integers(0, 3000))
def test_replica_allocation_invariants(m, alpha, extra):
    R = m + extra
    r = allocate_replicas(zipf_weights(m, alpha), R)
    assert r.sum() == R
    assert r.min() >= 1
    assert np.all(np.diff(r) <= 0)


def test_replica_allocation_rejects_too_few():
    with pytest.raises(ValueError):
        allocate_replicas(zipf_weights(10, 1.0), 9)


def test_sampling_frequency_of_top_rank():
    cat = build_catalog(300, 0.726, 4162, list(range(2000)), make_rng(0))
    draws = sample_query_files(cat, make_rng(7, "workload"), 120000)
    freq = float(np.mean(draws == 1))
    assert abs(freq - cat.query_weights[0]) <= 0.1 * cat.query_weights[0]
    assert np.array_equal(draws[:50], sample_query_files(cat, make_rng(7, "workload"), 120000)[:50])


def test_sampling_single_file():
    cat = build_catalog(1, 0.7, 3, [0, 1, 2], make_rng(0))
    rng = make_rng(1)
    assert {sample_query_file(cat, rng) for _ in range(20)} == {1}


def test_churn_examples():
    nodes = list(range(2000))
    assert make_churn(nodes, 0.0, "crash", make_rng(0)).leave_order == []
    full = make_churn(nodes, 1.0, "graceful", make_rng(0)).leave_order
    assert sorted(full) == nodes
    half = make_churn(nodes, 0.5, "crash", make_rng(0)).leave_order
    assert len(set(half)) == 1000


def test_churn_errors():
    with pytest.raises(ValueError):
        make_churn([1, 2], 1.5, "crash", make_rng(0))
    with pytest.raises(ValueError):
        make_churn([1, 2], 0.5, "explode", make_rng(0))


def test_without_hosts_drops_copies():
    cat = build_catalog(20, 0.7, 80, list(range(30)), make_rng(2))
    gone = set(range(10))
    view = cat.without_hosts(gone)
    assert all(not gone & set(h) for h in view.placement.values())
    assert view.total_replicas == sum(len(h) for h in view.placement.values())
