"""Self-check suite run by ``bimoe verify``.

Each check returns ``(ok, detail)``. ``fault="tie_break"`` routes with
highest-index tie breaking so the suite can demonstrate that its oracles
catch the mutation.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..balance import (
    LossConfig,
    BalanceStats,
    central_difference,
    gradient_relative_error,
    lb_loss,
    lb_loss_fixed_assignments,
    lb_loss_gradient,
    single_level_lb_loss,
)
from ..dispatch import DispatchConfig, build_plan, execute_plan
from ..expert import Expert, ExpertBank, expert_forward, init_bank
from ..netsim import INTER_NODE, INTRA_NODE, PAIRWISE_GLOBAL, enumerate_messages, simulate_all2all
from ..router import (
    BI_LEVEL,
    SINGLE_LEVEL,
    MacCounter,
    RouterParams,
    bi_level_route,
    route_batch,
    routing_flops,
)
from ..topology import build_groups, build_topology
from .config import ScenarioConfig
from .scenarios import run_breakdown, run_layer, scaling_rows

Check = Callable[[int, str], Tuple[bool, str]]
CHECKS: Dict[str, Check] = {}


def check(name):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


def oracle_probs(W: np.ndarray, x: np.ndarray) -> List[float]:
    """Scalar softmax with exact summation."""
    logits = [math.fsum(float(w) * float(v) for w, v in zip(row, x)) for row in W]
    top = max(logits)
    z = [math.exp(r - top) for r in logits]
    s = math.fsum(z)
    return [v / s for v in z]


def oracle_argmax(values: List[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def oracle_bi_level_outputs(params: RouterParams, bank: ExpertBank, tokens: np.ndarray) -> np.ndarray:
    """Per-token gate * expert output, evaluating every expert and picking one."""
    out = np.zeros_like(tokens)
    for t, x in enumerate(tokens):
        p = oracle_probs(params.W_p, x)
        q = oracle_probs(params.W_q, x)
        i, j = oracle_argmax(p), oracle_argmax(q)
        outputs = {(a, b): expert_forward(bank[a, b], x) for a in range(bank.n) for b in range(bank.m)}
        out[t] = p[i] * q[j] * outputs[(i, j)]
    return out


def _tie_break(fault: str) -> str:
    return "highest" if fault == "tie_break" else "lowest"


def _bank_with_biases(seed, n, m, d, d_ff) -> ExpertBank:
    bank = init_bank(seed, n, m, d, d_ff)
    rng = np.random.default_rng(seed + 7)
    experts = tuple(
        Expert(e.W1, rng.uniform(-0.1, 0.1, d_ff), e.W2, rng.uniform(-0.1, 0.1, d)) for e in bank.experts
    )
    return ExpertBank(n, m, experts)


@check("topology_partitions")
def _(seed, fault):
    for N in range(1, 65):
        for m in (k for k in range(1, N + 1) if N % k == 0):
            topo = build_topology(N // m, m)
            g = build_groups(topo)
            for family in (g.intra_groups, g.inter_groups):
                flat = sorted(r for grp in family for r in grp)
                if flat != list(range(N)):
                    return False, f"partition broken for n={N // m}, m={m}"
            for r in range(N):
                if topo.rank_of(*topo.locate(r)) != r:
                    return False, f"rank round-trip failed at {r}"
                if set(g.intra_group_of(r)) & set(g.inter_group_of(r)) != {r}:
                    return False, f"groups of rank {r} are not orthogonal"
    return True, "all (n, m) with N <= 64"


@check("router_tie_break")
def _(seed, fault):
    d = 4
    rng = np.random.default_rng(seed)
    x = rng.normal(size=d)
    for n, m in ((2, 2), (4, 8)):
        W_p = np.tile(rng.normal(size=d), (n, 1))
        W_q = np.tile(rng.normal(size=d), (m, 1))
        dec = bi_level_route(W_p, W_q, x, tie_break=_tie_break(fault))
        if (dec.node, dec.local) != (0, 0) or abs(dec.gate - 1.0 / (n * m)) > 1e-12:
            return False, f"tied router chose ({dec.node}, {dec.local}) for n={n}, m={m}"
    return True, "ties resolve to (0, 0)"


@check("softmax_properties")
def _(seed, fault):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        K, d = rng.integers(1, 20), rng.integers(1, 10)
        W, x = rng.normal(size=(K, d)), rng.normal(size=d)
        p = np.asarray(oracle_probs(W, x))
        params = RouterParams(SINGLE_LEVEL, int(d), W_r=W)
        got = route_batch(params, x[None, :], 1, int(K)).probs[0]
        if abs(got.sum() - 1) > 1e-9 or np.max(np.abs(got - p)) > 1e-12:
            return False, f"softmax mismatch for K={K}"
    return True, "sums to 1 and matches scalar oracle"


@check("routing_flop_counter")
def _(seed, fault):
    rng = np.random.default_rng(seed)
    for n in range(1, 9):
        for m in range(1, 33 // n + 1):
            if n * m > 32:
                continue
            T, d = int(rng.integers(0, 65)), int(rng.integers(1, 9))
            x = rng.normal(size=(T, d))
            for mode in (SINGLE_LEVEL, BI_LEVEL):
                params = RouterParams.init(mode, n, m, d, seed)
                counter = MacCounter()
                route_batch(params, x, n, m, counter=counter)
                if counter.macs != routing_flops(mode, n, m, T, d):
                    return False, f"{mode} n={n} m={m} T={T} d={d}: {counter.macs}"
                if params.param_count != (n * m * d if mode == SINGLE_LEVEL else (n + m) * d):
                    return False, "parameter count mismatch"
    return True, "instrumented MACs equal closed form for N <= 32, T <= 64"


@check("lb_loss_uniform")
def _(seed, fault):
    cfg = LossConfig(0.005, 0.005)
    rng = np.random.default_rng(seed)
    for n, m in ((1, 1), (2, 8), (16, 8)):
        uni = BalanceStats(np.full(n, 1 / n), np.full(n, 1 / n), np.full(m, 1 / m), np.full(m, 1 / m), 1)
        if abs(lb_loss(uni, cfg) - 0.01) > 1e-12:
            return False, f"uniform loss {lb_loss(uni, cfg)} for n={n}, m={m}"
    for _ in range(2000):
        n, m, T = (int(v) for v in rng.integers(1, 9, size=3))
        p = rng.dirichlet(np.ones(n), size=T)
        q = rng.dirichlet(np.ones(m), size=T)
        stats = BalanceStats(
            np.bincount(p.argmax(1), minlength=n) / T, p.mean(0),
            np.bincount(q.argmax(1), minlength=m) / T, q.mean(0), T,
        )
        additive = single_level_lb_loss(stats.f_nodes, stats.P_nodes, cfg.alpha) + single_level_lb_loss(
            stats.f_local, stats.Q_local, cfg.beta
        )
        if abs(additive - lb_loss(stats, cfg)) > 1e-15:
            return False, "loss is not the sum of its two terms"
        # with soft fractions (f = P) the floor is Cauchy-Schwarz: K * sum P^2 >= 1
        soft = BalanceStats(stats.P_nodes, stats.P_nodes, stats.Q_local, stats.Q_local, T)
        if lb_loss(soft, cfg) < cfg.alpha + cfg.beta - 1e-12:
            return False, "soft-fraction loss below alpha + beta"
    return True, "uniform = alpha + beta; additive; soft-fraction floor holds"


@check("lb_gradient")
def _(seed, fault):
    cfg = LossConfig(0.005, 0.005)
    worst = 0.0
    for s in range(seed, seed + 10):
        rng = np.random.default_rng(s)
        n, m, d, T = 3, 4, 5, 12
        params = RouterParams.init(BI_LEVEL, n, m, d, s, scale=3.0)
        x = rng.normal(size=(T, d))
        na, la = rng.integers(0, n, T), rng.integers(0, m, T)
        gp, gq = lb_loss_gradient(params, x, cfg, na, la)
        fd_p = central_difference(lambda M: lb_loss_fixed_assignments(M, params.W_q, x, cfg, na, la), params.W_p)
        fd_q = central_difference(lambda M: lb_loss_fixed_assignments(params.W_p, M, x, cfg, na, la), params.W_q)
        for g, fd in ((gp, fd_p), (gq, fd_q)):
            rel = gradient_relative_error(g, fd)
            worst = max(worst, rel)
    return worst < 1e-4, f"max relative error {worst:.2e}"


@check("oracle_equivalence")
def _(seed, fault):
    n, m, d, d_ff, T = 2, 2, 6, 8, 8
    topo = build_topology(n, m)
    bank = _bank_with_biases(seed, n, m, d, d_ff)
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(T, d))
    random_router = RouterParams.init(BI_LEVEL, n, m, d, seed)
    tied_router = RouterParams(BI_LEVEL, d, W_p=np.tile(rng.normal(size=d), (n, 1)), W_q=random_router.W_q)
    worst = 0.0
    for params in (random_router, tied_router):
        dec = route_batch(params, tokens, n, m, tie_break=_tie_break(fault))
        plan = build_plan(dec, topo, DispatchConfig(capacity_factor=float(T)), d)
        if plan.num_dropped:
            return False, "unexpected drops"
        out, _ = execute_plan(plan, bank, tokens)
        worst = max(worst, float(np.max(np.abs(out - oracle_bi_level_outputs(params, bank, tokens)))))
    return worst <= 1e-12, f"max abs deviation {worst:.2e}"


@check("launch_counts")
def _(seed, fault):
    expected = {(16, 8): (127, 22), (2, 8): (15, 8)}
    for (n, m), (pairwise, bi) in expected.items():
        topo = build_topology(n, m)
        msgs = {k: list(enumerate_messages(k, topo)) for k in (PAIRWISE_GLOBAL, INTER_NODE, INTRA_NODE)}
        per_rank = lambda k: sum(1 for s, _ in msgs[k] if s == 0)
        if per_rank(PAIRWISE_GLOBAL) != pairwise or per_rank(INTER_NODE) + per_rank(INTRA_NODE) != bi:
            return False, f"per-rank launches wrong for n={n}, m={m}"
    topo = build_topology(2, 8)
    if len(list(enumerate_messages(PAIRWISE_GLOBAL, topo))) != 240:
        return False, "pairwise message total"
    if sum(len(list(enumerate_messages(k, topo))) for k in (INTER_NODE, INTRA_NODE)) != 128:
        return False, "bi-level message total"
    return True, "127/22 per rank at 16x8; 240/128 messages at 2x8"


@check("dispatch_invariants")
def _(seed, fault):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        n, m, d, T = int(rng.integers(1, 5)), int(rng.integers(1, 5)), 3, int(rng.integers(1, 60))
        topo = build_topology(n, m)
        x = rng.normal(size=(T, d))
        for mode in (SINGLE_LEVEL, BI_LEVEL):
            dec = route_batch(RouterParams.init(mode, n, m, d, seed, scale=4.0), x, n, m)
            drops = []
            for cf in (0.25, 0.5, 1.0, 2.0, 4.0):
                plan = build_plan(dec, topo, DispatchConfig(capacity_factor=cf), d)
                if np.any(plan.admitted_rank > plan.rank_capacity):
                    return False, "rank capacity exceeded"
                if mode == BI_LEVEL and np.any(plan.admitted_node > plan.node_capacity):
                    return False, "node capacity exceeded"
                if plan.admitted_rank.sum() + plan.num_dropped != T:
                    return False, "tokens not conserved"
                if len(plan.collective_schedule) != (4 if mode == BI_LEVEL else 2):
                    return False, "wrong phase count"
                for desc in plan.collective_schedule:
                    if abs(desc.bytes.sum(axis=0).sum() - desc.bytes.sum(axis=1).sum()) > 1e-6:
                        return False, "bytes not conserved"
                drops.append(plan.num_dropped)
            if any(b > a for a, b in zip(drops, drops[1:])):
                return False, "more capacity produced more drops"
    return True, "capacity, conservation, phase count, monotone drops"


@check("bi_level_cheaper")
def _(seed, fault):
    for n in (2, 4, 8):
        for m in (2, 4, 8):
            for inter_bw in (12.5e9, 50e9):
                cfg = ScenarioConfig(n=n, m=m, inter_bw=inter_bw, seed=seed, sim_tokens_per_rank=8)
                single = run_layer(cfg, SINGLE_LEVEL).report.all2all_time
                bi = run_layer(cfg, BI_LEVEL).report.all2all_time
                if not bi < single:
                    return False, f"bi-level not cheaper at n={n}, m={m}, inter_bw={inter_bw:g}"
    return True, "bi-level All2All faster on every n, m >= 2 grid point"


@check("scaling_shapes")
def _(seed, fault):
    cfg = ScenarioConfig(seed=seed)
    rows = scaling_rows(cfg, (1, 2, 4, 8, 16), "weak")
    thr = {(r["mode"], r["nodes"]): r["samples_per_s"] for r in rows}
    if not thr[(SINGLE_LEVEL, 8)] < thr[(SINGLE_LEVEL, 4)]:
        return False, "pairwise throughput did not drop from 4 to 8 nodes"
    bi = [thr[(BI_LEVEL, k)] for k in (2, 4, 8, 16)]
    if any(b < a for a, b in zip(bi, bi[1:])):
        return False, "bi-level weak scaling not monotone"
    return True, "pairwise 8 < 4 nodes; bi-level non-decreasing 2..16"


@check("deterministic_csv")
def _(seed, fault):
    cfg = ScenarioConfig(n=2, m=4, seed=seed)
    return run_breakdown(cfg) == run_breakdown(cfg), "breakdown CSV reproducible"


def run_verify(seed: int = 0, fault: Optional[str] = None, only=None) -> List[Tuple[str, bool, str]]:
    if fault not in (None, "tie_break"):
        raise ValueError(f"unknown fault {fault!r}")
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        try:
            ok, detail = fn(seed, fault)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results


def format_results(results) -> str:
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in results]
    passed = sum(ok for _, ok, _ in results)
    lines.append(f"verify: {passed}/{len(results)} passed")
    return "\n".join(lines)
