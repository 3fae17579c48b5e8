import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bimoe.dispatch import (
    BI_LEVEL_PHASES,
    SINGLE_LEVEL_PHASES,
    DispatchConfig,
    build_plan,
    capacity,
    default_sources,
    direct_combine,
    execute_plan,
    phases_per_layer,
)
from bimoe.expert import expert_forward, init_bank
from bimoe.netsim import INTER_NODE, INTRA_NODE
from bimoe.router import BI_LEVEL, SINGLE_LEVEL, RouterParams, RoutingBatch, route_batch
from bimoe.topology import build_topology


def _decisions(n, m, node, local, gate=None, mode=BI_LEVEL):
    node, local = np.asarray(node), np.asarray(local)
    T = len(node)
    gate = np.full(T, 0.5) if gate is None else np.asarray(gate, float)
    probs = np.full((T, n * m if mode == SINGLE_LEVEL else n), 1.0)
    q = None if mode == SINGLE_LEVEL else np.full((T, m), 1.0)
    return RoutingBatch(mode, n, m, probs, node, local, gate, local_probs=q)


@pytest.mark.parametrize("T,dest,cf,expected", [(8, 4, 2.0, 4), (0, 3, 2.0, 0), (7, 2, 1.0, 4), (5, 1, 0.5, 3)])
def test_capacity(T, dest, cf, expected):
    assert capacity(T, dest, cf) == expected


def test_capacity_errors():
    with pytest.raises(ValueError):
        capacity(4, 0, 1.0)
    with pytest.raises(ValueError):
        DispatchConfig(capacity_factor=0.0)


def test_uniform_assignments_no_drops():
    n, m, T = 2, 4, 32
    e = np.arange(T) % (n * m)
    plan = build_plan(_decisions(n, m, e // m, e % m), build_topology(n, m), DispatchConfig(2.0), 4)
    assert plan.num_dropped == 0


def test_node_capacity_drops_latest_tokens():
    T = 8
    plan = build_plan(_decisions(2, 1, np.zeros(T, int), np.zeros(T, int)), build_topology(2, 1),
                      DispatchConfig(1.0), 4)
    assert plan.node_capacity == 4
    assert plan.num_dropped == 4
    assert plan.dropped.tolist() == [False] * 4 + [True] * 4
    # dropped tokens stay home with zero gate
    np.testing.assert_array_equal(plan.dest_rank[plan.dropped], plan.source[plan.dropped])
    assert not plan.gate[plan.dropped].any()


def test_rank_capacity_after_node_capacity():
    # node 0 admits 4 of 6; rank capacity 2 then trims slot 0 of node 0
    node = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    local = np.array([0, 0, 0, 1, 0, 1, 0, 1])
    plan = build_plan(_decisions(2, 2, node, local), build_topology(2, 2), DispatchConfig(1.0), 2)
    assert (plan.node_capacity, plan.rank_capacity) == (4, 2)
    assert plan.dropped.tolist() == [False, False, True, False, True, True, False, False]
    assert plan.admitted_rank.tolist() == [2, 1, 1, 1]


def test_single_node_has_no_inter_bytes():
    params = RouterParams.init(BI_LEVEL, 1, 4, 6, seed=0)
    x = np.random.default_rng(0).normal(size=(16, 6))
    plan = build_plan(route_batch(params, x, 1, 4), build_topology(1, 4), DispatchConfig(), 6)
    for desc in plan.collective_schedule:
        if desc.kind == INTER_NODE:
            # only self entries remain, and those never touch the wire
            np.testing.assert_array_equal(desc.bytes, np.diag(np.diag(desc.bytes)))


def test_phase_names_and_kinds():
    params = RouterParams.init(BI_LEVEL, 2, 2, 3)
    x = np.random.default_rng(0).normal(size=(8, 3))
    plan = build_plan(route_batch(params, x, 2, 2), build_topology(2, 2), DispatchConfig(), 3)
    assert tuple(d.phase for d in plan.collective_schedule) == BI_LEVEL_PHASES
    assert [d.kind for d in plan.collective_schedule] == [INTER_NODE, INTRA_NODE, INTRA_NODE, INTER_NODE]
    single = build_plan(route_batch(RouterParams.init(SINGLE_LEVEL, 2, 2, 3), x, 2, 2),
                        build_topology(2, 2), DispatchConfig(), 3)
    assert tuple(d.phase for d in single.collective_schedule) == SINGLE_LEVEL_PHASES
    assert phases_per_layer(BI_LEVEL) == 4 and phases_per_layer(SINGLE_LEVEL) == 2


def test_schedule_bytes_count_admitted_crossings():
    # token 0 on rank 0 -> expert (1, 1): one inter hop 0->2, one intra hop 2->3
    dec = _decisions(2, 2, [1, 0], [1, 0])
    plan = build_plan(dec, build_topology(2, 2), DispatchConfig(4.0), 5, source=np.array([0, 0]))
    inter, intra = plan.collective_schedule[0].bytes, plan.collective_schedule[1].bytes
    assert inter[0, 2] == 5 * 2 and intra[2, 3] == 5 * 2
    assert inter.sum() - inter.trace() == 10
    assert intra.sum() - intra.trace() == 10


def test_shape_mismatch_rejected():
    dec = _decisions(2, 2, [0, 1], [0, 1])
    with pytest.raises(ValueError):
        build_plan(dec, build_topology(2, 3), DispatchConfig(), 4)
    with pytest.raises(ValueError):
        build_plan(dec, build_topology(2, 2), DispatchConfig(), 4, source=np.array([0, 9]))


def test_single_token_output():
    bank = init_bank(0, 1, 1, 3, 4)
    x = np.array([[0.3, -0.1, 0.8]])
    plan = build_plan(_decisions(1, 1, [0], [0], gate=[0.37]), build_topology(1, 1), DispatchConfig(), 3)
    out, log = execute_plan(plan, bank, x)
    np.testing.assert_array_equal(out[0], 0.37 * expert_forward(bank[0, 0], x[0]))
    assert log.messages == []


def _setup(n, m, d, T, seed, mode=BI_LEVEL, cf=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, d))
    dec = route_batch(RouterParams.init(mode, n, m, d, seed), x, n, m)
    plan = build_plan(dec, build_topology(n, m), DispatchConfig(float(T) if cf is None else cf), d)
    return x, dec, plan, init_bank(seed, n, m, d, 2 * d)


def _oracle(dec, bank, x):
    # evaluate every expert for every token, then pick the routed one
    out = np.zeros_like(x)
    for t in range(len(x)):
        all_out = {(i, j): expert_forward(bank[i, j], x[t]) for i in range(bank.n) for j in range(bank.m)}
        out[t] = dec.gate[t] * all_out[int(dec.node[t]), int(dec.local[t])]
    return out


def test_2x2_matches_oracle():
    x, dec, plan, bank = _setup(2, 2, 6, 8, seed=3)
    assert plan.num_dropped == 0
    out, _ = execute_plan(plan, bank, x)
    assert np.max(np.abs(out - _oracle(dec, bank, x))) <= 1e-12


@pytest.mark.parametrize("mode", [BI_LEVEL, SINGLE_LEVEL])
@pytest.mark.parametrize("n,m", [(2, 2), (3, 4), (1, 5)])
def test_location_transparency(mode, n, m):
    x, dec, plan, bank = _setup(n, m, 5, 24, seed=n * 10 + m, mode=mode)
    out, _ = execute_plan(plan, bank, x)
    np.testing.assert_array_equal(out, direct_combine(dec, bank, x))


def test_all_dropped_gives_zero_output():
    x, dec, plan, bank = _setup(2, 2, 4, 400, seed=1, cf=1e-3)
    # one token per node survives a capacity of 1; clear those by hand
    assert plan.num_dropped >= 398
    plan.dropped[:] = True
    out, log = execute_plan(plan, bank, x)
    assert not out.any() and log.messages == [] and log.expert_macs == 0


def test_message_log_matches_schedule():
    x, dec, plan, bank = _setup(3, 2, 4, 30, seed=5, cf=1.0)
    _, log = execute_plan(plan, bank, x)
    for desc in plan.collective_schedule:
        sched = desc.bytes.copy()
        np.fill_diagonal(sched, 0.0)
        np.testing.assert_array_equal(log.byte_matrix(desc.phase, plan.N), sched)
    assert log.expert_macs == (30 - plan.num_dropped) * 2 * 4 * 8


def test_execute_rejects_bad_inputs():
    x, dec, plan, bank = _setup(2, 2, 4, 8, seed=0)
    with pytest.raises(ValueError):
        execute_plan(plan, bank, x[:, :3])
    with pytest.raises(ValueError):
        execute_plan(plan, init_bank(0, 1, 2, 4, 8), x)
    plan.routed_local[0] = 5
    plan.dropped[0] = False
    with pytest.raises(IndexError):
        execute_plan(plan, bank, x)


def test_default_sources_are_balanced():
    src = default_sources(20, 8)
    counts = np.bincount(src, minlength=8)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 20


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 60), st.sampled_from([BI_LEVEL, SINGLE_LEVEL]),
       st.integers(0, 1000))
def test_plan_invariants(n, m, T, mode, seed):
    x = np.random.default_rng(seed).normal(size=(T, 3))
    dec = route_batch(RouterParams.init(mode, n, m, 3, seed, scale=4.0), x, n, m)
    topo = build_topology(n, m)
    drops = []
    for cf in (0.25, 0.5, 1.0, 2.0, 8.0):
        plan = build_plan(dec, topo, DispatchConfig(cf), 3)
        assert np.all(plan.admitted_rank <= plan.rank_capacity)
        if mode == BI_LEVEL:
            assert np.all(plan.admitted_node <= plan.node_capacity)
        assert plan.admitted_rank.sum() + plan.num_dropped == T
        assert plan.admitted_node.sum() + plan.num_dropped == T
        assert len(plan.collective_schedule) == phases_per_layer(mode)
        for desc in plan.collective_schedule:
            desc.check_against(topo)
            assert desc.bytes.sum(axis=1).sum() == pytest.approx(desc.bytes.sum(axis=0).sum())
        drops.append(plan.num_dropped)
    assert all(b <= a for a, b in zip(drops, drops[1:]))
