"""Capacity-constrained dispatch plans and their All2All schedules.

Bi-level plans move a token in two hops: across nodes to the GPU with the
same local index on the target node, then across that node to the target
GPU. The return trip reverses both hops, giving four phases. Single-level
plans send each token straight to its expert and back, giving two.

Capacity is enforced before anything moves: a token over capacity is
dropped to the residual path and stays on its source rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .expert import ExpertBank, expert_forward, expert_macs
from .netsim import INTER_NODE, INTRA_NODE, PAIRWISE_GLOBAL, CollectiveDescriptor
from .router import BI_LEVEL, SINGLE_LEVEL, RoutingBatch
from .topology import ClusterTopology

BI_LEVEL_PHASES = ("inter_dispatch", "intra_dispatch", "intra_return", "inter_return")
SINGLE_LEVEL_PHASES = ("dispatch", "return")


def phases_per_layer(mode: str) -> int:
    return len(BI_LEVEL_PHASES) if mode == BI_LEVEL else len(SINGLE_LEVEL_PHASES)


@dataclass(frozen=True)
class DispatchConfig:
    capacity_factor: float = 2.0
    bytes_per_element: int = 2
    overflow_policy: str = "drop_with_residual"

    def __post_init__(self):
        if not self.capacity_factor > 0:
            raise ValueError("capacity_factor must be > 0")
        if self.bytes_per_element < 1:
            raise ValueError("bytes_per_element must be >= 1")
        if self.overflow_policy != "drop_with_residual":
            raise ValueError(f"unsupported overflow policy {self.overflow_policy!r}")


def capacity(T: int, destinations: int, cf: float) -> int:
    if destinations < 1:
        raise ValueError("destinations must be >= 1")
    if T == 0:
        return 0
    # round the quotient first so that e.g. 8/4*2.0 does not land on 4.000000000001
    return math.ceil(round(T / destinations * cf, 9))


def _admit_in_order(keys: np.ndarray, eligible: np.ndarray, cap: int) -> np.ndarray:
    """Admit the first ``cap`` eligible tokens per key, by token index."""
    admitted = np.zeros(len(keys), dtype=bool)
    seen = {}
    for t in np.flatnonzero(eligible):
        k = int(keys[t])
        c = seen.get(k, 0)
        if c < cap:
            admitted[t] = True
            seen[k] = c + 1
    return admitted


def default_sources(T: int, N: int) -> np.ndarray:
    """Contiguous, near-equal blocks of tokens per rank."""
    return (np.arange(T, dtype=np.int64) * N) // max(T, 1)


@dataclass
class DispatchPlan:
    mode: str
    n: int
    m: int
    d: int
    source: np.ndarray
    routed_node: np.ndarray
    routed_local: np.ndarray
    router_gate: np.ndarray
    dropped: np.ndarray
    node_capacity: int
    rank_capacity: int
    bytes_per_element: int = 2
    token_scale: float = 1.0
    collective_schedule: List[CollectiveDescriptor] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.source)

    @property
    def N(self) -> int:
        return self.n * self.m

    @property
    def dest_node(self) -> np.ndarray:
        return np.where(self.dropped, self.source // self.m, self.routed_node)

    @property
    def dest_local(self) -> np.ndarray:
        return np.where(self.dropped, self.source % self.m, self.routed_local)

    @property
    def dest_rank(self) -> np.ndarray:
        return self.dest_node * self.m + self.dest_local

    @property
    def gate(self) -> np.ndarray:
        return np.where(self.dropped, 0.0, self.router_gate)

    @property
    def admitted_node(self) -> np.ndarray:
        return np.bincount(self.routed_node[~self.dropped], minlength=self.n)

    @property
    def admitted_rank(self) -> np.ndarray:
        ranks = (self.routed_node * self.m + self.routed_local)[~self.dropped]
        return np.bincount(ranks, minlength=self.N)

    @property
    def num_dropped(self) -> int:
        return int(self.dropped.sum())

    @property
    def bytes_per_token(self) -> float:
        return self.d * self.bytes_per_element * self.token_scale


def build_schedule(plan: DispatchPlan, mask: Optional[np.ndarray] = None) -> List[CollectiveDescriptor]:
    """Collective phases for the admitted tokens selected by ``mask``."""
    N, m = plan.N, plan.m
    active = ~plan.dropped if mask is None else (~plan.dropped & mask)
    src = plan.source[active]
    node = plan.routed_node[active]
    local = plan.routed_local[active]
    w = plan.bytes_per_token

    def matrix(a, b):
        B = np.zeros((N, N))
        np.add.at(B, (a, b), w)
        return B

    if plan.mode == SINGLE_LEVEL:
        fwd = matrix(src, node * m + local)
        return [
            CollectiveDescriptor("dispatch", PAIRWISE_GLOBAL, fwd),
            CollectiveDescriptor("return", PAIRWISE_GLOBAL, fwd.T.copy()),
        ]
    hop = node * m + src % m
    inter = matrix(src, hop)
    intra = matrix(hop, node * m + local)
    return [
        CollectiveDescriptor("inter_dispatch", INTER_NODE, inter),
        CollectiveDescriptor("intra_dispatch", INTRA_NODE, intra),
        CollectiveDescriptor("intra_return", INTRA_NODE, intra.T.copy()),
        CollectiveDescriptor("inter_return", INTER_NODE, inter.T.copy()),
    ]


def build_plan(
    decisions: RoutingBatch,
    topology: ClusterTopology,
    cfg: DispatchConfig,
    d: int,
    source: Optional[np.ndarray] = None,
    token_scale: float = 1.0,
) -> DispatchPlan:
    """Apply node-level then rank-level capacity and derive the schedule.

    Single-level plans have no node hop, so only rank capacity applies.
    ``token_scale`` multiplies wire bytes and expert work, letting a small
    routed sample stand in for a larger real batch.
    """
    n, m, N = topology.n, topology.m, topology.N
    if decisions.n != n or decisions.m != m:
        raise ValueError(
            f"decisions are for a {decisions.n}x{decisions.m} cluster, topology is {n}x{m}"
        )
    T = decisions.T
    source = default_sources(T, N) if source is None else np.asarray(source, dtype=np.int64)
    if source.shape != (T,) or (T and (source.min() < 0 or source.max() >= N)):
        raise ValueError("source ranks must be one per token, within [0, N)")

    node = np.asarray(decisions.node, dtype=np.int64)
    local = np.asarray(decisions.local, dtype=np.int64)
    node_cap = capacity(T, n, cfg.capacity_factor)
    rank_cap = capacity(T, N, cfg.capacity_factor)

    admitted = np.ones(T, dtype=bool)
    if decisions.mode == BI_LEVEL:
        admitted = _admit_in_order(node, admitted, node_cap)
    admitted = _admit_in_order(node * m + local, admitted, rank_cap)

    plan = DispatchPlan(
        mode=decisions.mode,
        n=n,
        m=m,
        d=d,
        source=source,
        routed_node=node,
        routed_local=local,
        router_gate=np.asarray(decisions.gate, dtype=np.float64),
        dropped=~admitted,
        node_capacity=node_cap,
        rank_capacity=rank_cap,
        bytes_per_element=cfg.bytes_per_element,
        token_scale=token_scale,
    )
    plan.collective_schedule = build_schedule(plan)
    return plan


@dataclass
class ExecutionLog:
    """Per-message log of a simulated execution: ``(phase, src, dst, nbytes)``."""

    messages: List[Tuple[str, int, int, float]] = field(default_factory=list)
    expert_macs: int = 0

    def byte_matrix(self, phase: str, N: int) -> np.ndarray:
        B = np.zeros((N, N))
        for name, src, dst, nbytes in self.messages:
            if name == phase:
                B[src, dst] += nbytes
        return B


def _move(buffers, route, phase, log, nbytes):
    """Send every buffered item to ``route(rank, token)``; log cross-rank moves."""
    moved = {}
    for rank, items in buffers.items():
        for token, payload in items:
            dst = route(rank, token)
            if dst != rank:
                log.messages.append((phase, rank, dst, nbytes))
            moved.setdefault(dst, []).append((token, payload))
    return moved


def execute_plan(plan: DispatchPlan, expert_bank: ExpertBank, tokens: np.ndarray):
    """Carry admitted tokens through the schedule, run experts, bring results home.

    Returns ``(outputs, log)``. Dropped tokens produce zero rows; adding the
    residual is left to the caller.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (plan.T, plan.d):
        raise ValueError(f"tokens must be ({plan.T}, {plan.d}), got {tokens.shape}")
    if expert_bank.n != plan.n or expert_bank.m != plan.m:
        raise ValueError("expert bank shape does not match the plan")
    m = plan.m
    if np.any(plan.routed_node[~plan.dropped] >= plan.n) or np.any(plan.routed_local[~plan.dropped] >= m):
        raise IndexError("plan routes to an expert outside the bank")

    log = ExecutionLog()
    nbytes = plan.bytes_per_token
    home = {int(t): int(plan.source[t]) for t in range(plan.T)}
    buffers = {}
    for t in np.flatnonzero(~plan.dropped):
        buffers.setdefault(int(plan.source[t]), []).append((int(t), tokens[t]))

    expert_rank = lambda r, t: int(plan.routed_node[t]) * m + int(plan.routed_local[t])
    if plan.mode == BI_LEVEL:
        hop = lambda r, t: int(plan.routed_node[t]) * m + home[t] % m
        buffers = _move(buffers, hop, "inter_dispatch", log, nbytes)
        buffers = _move(buffers, expert_rank, "intra_dispatch", log, nbytes)
    else:
        buffers = _move(buffers, expert_rank, "dispatch", log, nbytes)

    computed = {}
    for rank, items in buffers.items():
        expert = expert_bank[divmod(rank, m)]
        computed[rank] = [(t, expert_forward(expert, x)) for t, x in items]
        log.expert_macs += len(items) * expert_macs(expert.d, expert.d_ff)
    buffers = computed

    if plan.mode == BI_LEVEL:
        back_hop = lambda r, t: (r // m) * m + home[t] % m
        buffers = _move(buffers, back_hop, "intra_return", log, nbytes)
        buffers = _move(buffers, lambda r, t: home[t], "inter_return", log, nbytes)
    else:
        buffers = _move(buffers, lambda r, t: home[t], "return", log, nbytes)

    out = np.zeros_like(tokens)
    gate = plan.gate
    for rank, items in buffers.items():
        for t, y in items:
            assert rank == home[t]
            out[t] = gate[t] * y
    return out, log


def direct_combine(decisions: RoutingBatch, expert_bank: ExpertBank, tokens: np.ndarray) -> np.ndarray:
    """In-place evaluation of ``gate * E_{i,j}(x)`` per token, no capacity, no movement."""
    tokens = np.asarray(tokens, dtype=np.float64)
    out = np.zeros_like(tokens)
    for t in range(tokens.shape[0]):
        expert = expert_bank[int(decisions.node[t]), int(decisions.local[t])]
        out[t] = decisions.gate[t] * expert_forward(expert, tokens[t])
    return out
