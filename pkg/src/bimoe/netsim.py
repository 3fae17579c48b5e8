"""Fluid cost model for All2All collectives on a two-tier cluster.

Each collective phase costs::

    launch_overhead * launches_per_rank
    + max over nodes of NIC bytes / effective inter-node bandwidth
    + max over ranks of NVSwitch bytes / intra-node bandwidth

Effective inter-node bandwidth shrinks once the number of concurrent
rank-to-rank inter-node flows exceeds ``bisection_capacity``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .expert import expert_macs
from .topology import ClusterTopology, build_groups

PAIRWISE_GLOBAL = "pairwise_global"
INTER_NODE = "inter_node"
INTRA_NODE = "intra_node"
KINDS = (PAIRWISE_GLOBAL, INTER_NODE, INTRA_NODE)


@dataclass
class CollectiveDescriptor:
    """One All2All phase: ``bytes[src, dst]`` over global ranks."""

    phase: str
    kind: str
    bytes: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown collective kind {self.kind!r}")
        self.bytes = np.asarray(self.bytes, dtype=np.float64)
        if self.bytes.ndim != 2 or self.bytes.shape[0] != self.bytes.shape[1]:
            raise ValueError("byte matrix must be square")
        if np.any(self.bytes < 0):
            raise ValueError("byte matrix must be non-negative")

    def check_against(self, topology: ClusterTopology) -> None:
        N, m = topology.N, topology.m
        if self.bytes.shape != (N, N):
            raise ValueError(f"byte matrix is {self.bytes.shape}, cluster has N={N}")
        ranks = np.arange(N)
        if self.kind == INTER_NODE:
            allowed = (ranks[:, None] % m) == (ranks[None, :] % m)
        elif self.kind == INTRA_NODE:
            allowed = (ranks[:, None] // m) == (ranks[None, :] // m)
        else:
            return
        if np.any(self.bytes[~allowed] != 0):
            raise ValueError(f"{self.kind} phase {self.phase!r} sends outside its groups")


def group_size(kind: str, topology: ClusterTopology) -> int:
    return {PAIRWISE_GLOBAL: topology.N, INTER_NODE: topology.n, INTRA_NODE: topology.m}[kind]


def count_launches(descriptor: CollectiveDescriptor, topology: ClusterTopology) -> int:
    """Send/recv pairs posted by each rank: every group peer except itself."""
    return group_size(descriptor.kind, topology) - 1


def enumerate_messages(kind: str, topology: ClusterTopology) -> Iterator[Tuple[int, int]]:
    """Walk the posting loop of every rank and yield ``(src, dst)`` pairs."""
    groups = build_groups(topology)
    for rank in range(topology.N):
        if kind == PAIRWISE_GLOBAL:
            peers = range(topology.N)
        elif kind == INTER_NODE:
            peers = groups.inter_group_of(rank)
        else:
            peers = groups.intra_group_of(rank)
        for peer in peers:
            if peer != rank:
                yield rank, peer


@dataclass
class PhaseCost:
    phase: str
    kind: str
    launches: int
    messages: int
    bytes_inter: float
    bytes_intra: float
    inter_flows: int
    time_s: float


def _split_bytes(B: np.ndarray, m: int):
    N = B.shape[0]
    node = np.arange(N) // m
    same_node = node[:, None] == node[None, :]
    inter = np.where(same_node, 0.0, B)
    intra = np.where(same_node, B, 0.0)
    np.fill_diagonal(intra, 0.0)
    return inter, intra


def inter_flows(inter: np.ndarray, m: int) -> int:
    return int(np.count_nonzero(inter))


def simulate_all2all(descriptor: CollectiveDescriptor, topology: ClusterTopology) -> PhaseCost:
    descriptor.check_against(topology)
    n, m = topology.n, topology.m
    inter, intra = _split_bytes(descriptor.bytes, m)

    launches = count_launches(descriptor, topology)
    flows = inter_flows(inter, m)
    congestion = max(1.0, flows / topology.bisection_capacity)
    effective_inter_bw = topology.inter_bw / congestion

    node_out = inter.sum(axis=1).reshape(n, m).sum(axis=1)
    node_in = inter.sum(axis=0).reshape(n, m).sum(axis=1)
    nic_bytes = float(np.max(np.maximum(node_out, node_in)))

    rank_bytes = float(np.max(np.maximum(intra.sum(axis=1), intra.sum(axis=0))))

    time_s = (
        topology.launch_overhead * launches
        + nic_bytes / effective_inter_bw
        + rank_bytes / topology.intra_bw
    )
    return PhaseCost(
        phase=descriptor.phase,
        kind=descriptor.kind,
        launches=launches,
        messages=launches * topology.N,
        bytes_inter=float(inter.sum()),
        bytes_intra=float(intra.sum()),
        inter_flows=flows,
        time_s=time_s,
    )


@dataclass
class CostReport:
    mode: str
    phases: List[PhaseCost] = field(default_factory=list)
    compute_time: float = 0.0
    expert_macs: float = 0.0

    @property
    def all2all_time(self) -> float:
        return sum(p.time_s for p in self.phases)

    @property
    def inter_time(self) -> float:
        return sum(p.time_s for p in self.phases if p.kind == INTER_NODE)

    @property
    def intra_time(self) -> float:
        return sum(p.time_s for p in self.phases if p.kind == INTRA_NODE)

    @property
    def total_time(self) -> float:
        return self.all2all_time + self.compute_time

    @property
    def all2all_ratio(self) -> float:
        total = self.total_time
        return self.all2all_time / total if total > 0 else 0.0

    @property
    def launches_per_rank(self) -> int:
        return sum(p.launches for p in self.phases)

    @property
    def total_messages(self) -> int:
        return sum(p.messages for p in self.phases)

    @property
    def bytes_inter(self) -> float:
        return sum(p.bytes_inter for p in self.phases)

    @property
    def bytes_intra(self) -> float:
        return sum(p.bytes_intra for p in self.phases)


def compute_time(admitted_per_rank, d: int, d_ff: int, compute_rate: float, token_scale: float = 1.0):
    """Expert time of the busiest rank; returns ``(seconds, busiest_rank_macs)``."""
    busiest = float(np.max(admitted_per_rank)) if len(admitted_per_rank) else 0.0
    macs = busiest * token_scale * expert_macs(d, d_ff)
    return macs / compute_rate, macs


def simulate_layer(
    mode: str,
    topology: ClusterTopology,
    plan,
    d_ff: int,
    compute_rate: float,
    schedule: Optional[List[CollectiveDescriptor]] = None,
) -> CostReport:
    """Cost of one MoE layer given a dispatch plan.

    ``schedule`` defaults to the plan's own collective schedule; pass a
    chunk's schedule to cost a slice of the batch.
    """
    if plan.mode != mode:
        raise ValueError(f"plan was built for {plan.mode}, asked to cost {mode}")
    schedule = plan.collective_schedule if schedule is None else schedule
    report = CostReport(mode=mode)
    for desc in schedule:
        report.phases.append(simulate_all2all(desc, topology))
    report.compute_time, report.expert_macs = compute_time(
        plan.admitted_rank, plan.d, d_ff, compute_rate, plan.token_scale
    )
    return report
