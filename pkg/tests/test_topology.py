import pytest
from hypothesis import given, strategies as st

from bimoe.topology import ClusterTopology, LinkParams, build_groups, build_topology


def test_degenerate_cluster():
    topo = build_topology(1, 1)
    groups = build_groups(topo)
    assert topo.N == 1
    assert groups.intra_group_of(0) == (0,)
    assert groups.inter_group_of(0) == (0,)


def test_full_cluster_size():
    assert build_topology(16, 8).N == 128


def test_bandwidth_heterogeneity_enforced():
    build_topology(2, 8, LinkParams(intra_bw=600e9, inter_bw=50e9))
    with pytest.raises(ValueError):
        build_topology(2, 8, LinkParams(intra_bw=50e9, inter_bw=600e9))


@pytest.mark.parametrize("n,m", [(0, 8), (2, 0)])
def test_zero_counts_rejected(n, m):
    with pytest.raises(ValueError):
        build_topology(n, m)


@pytest.mark.parametrize("field", ["intra_bw", "inter_bw", "bisection_capacity"])
def test_nonpositive_bandwidth_rejected(field):
    with pytest.raises(ValueError):
        ClusterTopology(2, 2, **{field: 0.0})


def test_negative_launch_overhead_rejected():
    with pytest.raises(ValueError):
        ClusterTopology(2, 2, launch_overhead=-1e-6)


def _enumerated_groups(n, m):
    # brute force: bucket every rank by node and by local index
    intra = {k: [r for r in range(n * m) if r // m == k] for k in range(n)}
    inter = {l: [r for r in range(n * m) if r % m == l] for l in range(m)}
    return intra, inter


def test_rank_9_on_2x8():
    g = build_groups(build_topology(2, 8))
    assert g.intra_group_of(9) == tuple(range(8, 16))
    assert g.inter_group_of(9) == (1, 9)
    intra, inter = _enumerated_groups(2, 8)
    for r in range(16):
        assert list(g.intra_group_of(r)) == intra[r // 8]
        assert list(g.inter_group_of(r)) == inter[r % 8]


def test_single_node_groups():
    g = build_groups(build_topology(1, 4))
    assert g.intra_groups == ((0, 1, 2, 3),)
    assert g.inter_groups == ((0,), (1,), (2,), (3,))


def test_rank_4_on_3x2():
    g = build_groups(build_topology(3, 2))
    assert g.intra_group_of(4) == (4, 5)
    assert g.inter_group_of(4) == (0, 2, 4)


def test_partitions_exhaustive_up_to_64():
    for N in range(1, 65):
        for m in [k for k in range(1, N + 1) if N % k == 0]:
            n = N // m
            topo = build_topology(n, m)
            g = build_groups(topo)
            intra, inter = _enumerated_groups(n, m)
            assert [list(x) for x in g.intra_groups] == list(intra.values())
            assert [list(x) for x in g.inter_groups] == list(inter.values())
            for family in (g.intra_groups, g.inter_groups):
                assert sorted(r for grp in family for r in grp) == list(range(N))


@given(st.integers(1, 12), st.integers(1, 12))
def test_round_trip_and_orthogonality(n, m):
    topo = build_topology(n, m)
    g = build_groups(topo)
    for r in range(topo.N):
        node, local = topo.locate(r)
        assert (node, local) == (r // m, r % m)
        assert topo.rank_of(node, local) == r
        assert set(g.intra_group_of(r)) & set(g.inter_group_of(r)) == {r}


def test_groups_deterministic():
    topo = build_topology(4, 8)
    assert build_groups(topo) == build_groups(build_topology(4, 8))


def test_locate_out_of_range():
    topo = build_topology(2, 2)
    with pytest.raises(IndexError):
        topo.locate(4)
    with pytest.raises(IndexError):
        topo.rank_of(2, 0)


def test_topology_is_frozen():
    topo = build_topology(2, 2)
    with pytest.raises(AttributeError):
        topo.n = 3
