"""Cluster shape and the two orthogonal process-group partitions.

A cluster is ``n`` nodes with ``m`` GPUs each. Global rank ``r`` lives on
node ``r // m`` at local index ``r % m``. Intra-node groups collect the
ranks of one node; inter-node groups collect the ranks that share a local
index across nodes, so the inter-node exchange is ``m`` disjoint ``n``-way
collectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple


@dataclass(frozen=True)
class LinkParams:
    intra_bw: float = 600e9
    inter_bw: float = 50e9
    launch_overhead: float = 3.0e-3
    bisection_capacity: float = 192.0


@dataclass(frozen=True)
class ClusterTopology:
    """Immutable ``n x m`` cluster with heterogeneous link bandwidths.

    ``intra_bw`` is per GPU (NVSwitch port), ``inter_bw`` is the aggregate NIC
    bandwidth of one node. ``bisection_capacity`` is how many concurrent
    inter-node flows the fabric carries before bandwidth is shared.
    """

    n: int
    m: int
    intra_bw: float = 600e9
    inter_bw: float = 50e9
    launch_overhead: float = 3.0e-3
    bisection_capacity: float = 192.0

    def __post_init__(self):
        if not (isinstance(self.n, int) and isinstance(self.m, int)):
            raise TypeError("n and m must be integers")
        if self.n < 1 or self.m < 1:
            raise ValueError(f"n and m must be >= 1, got n={self.n}, m={self.m}")
        for name in ("intra_bw", "inter_bw", "bisection_capacity"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        if not (self.launch_overhead >= 0 and math.isfinite(self.launch_overhead)):
            raise ValueError(f"launch_overhead must be finite and >= 0, got {self.launch_overhead}")
        if self.intra_bw < self.inter_bw:
            raise ValueError(
                f"intra_bw ({self.intra_bw:g}) must be >= inter_bw ({self.inter_bw:g})"
            )

    @property
    def N(self) -> int:
        return self.n * self.m

    def locate(self, rank: int) -> Tuple[int, int]:
        """Map a global rank to ``(node, local)``."""
        if not 0 <= rank < self.N:
            raise IndexError(f"rank {rank} out of range for N={self.N}")
        return rank // self.m, rank % self.m

    def rank_of(self, node: int, local: int) -> int:
        if not (0 <= node < self.n and 0 <= local < self.m):
            raise IndexError(f"(node={node}, local={local}) outside {self.n}x{self.m} cluster")
        return node * self.m + local


def build_topology(n: int, m: int, link_params: Optional[LinkParams] = None) -> ClusterTopology:
    link_params = link_params or LinkParams()
    return ClusterTopology(
        n=n,
        m=m,
        intra_bw=link_params.intra_bw,
        inter_bw=link_params.inter_bw,
        launch_overhead=link_params.launch_overhead,
        bisection_capacity=link_params.bisection_capacity,
    )


@dataclass(frozen=True)
class ProcessGroups:
    intra_groups: Tuple[Tuple[int, ...], ...]
    inter_groups: Tuple[Tuple[int, ...], ...]
    m: int = field(repr=False)

    def intra_group_of(self, rank: int) -> Tuple[int, ...]:
        return self.intra_groups[rank // self.m]

    def inter_group_of(self, rank: int) -> Tuple[int, ...]:
        return self.inter_groups[rank % self.m]


def build_groups(topology: ClusterTopology) -> ProcessGroups:
    n, m = topology.n, topology.m
    intra: List[Tuple[int, ...]] = [tuple(range(k * m, k * m + m)) for k in range(n)]
    inter: List[Tuple[int, ...]] = [tuple(range(l, n * m, m)) for l in range(m)]
    return ProcessGroups(intra_groups=tuple(intra), inter_groups=tuple(inter), m=m)
