"""Named scenarios: scaling sweeps, model-size sweep, layer breakdown, pipelining.

Every scenario routes a small seeded sample of tokens
(``sim_tokens_per_rank`` per GPU) with real router weights and scales the
resulting wire bytes and expert work up to the configured micro-batch.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from ..balance import LossConfig, compute_stats, dispatch_fractions, lb_terms, single_level_lb_loss
from ..dispatch import DispatchPlan, build_plan, build_schedule, phases_per_layer
from ..netsim import CostReport, compute_time, simulate_all2all, simulate_layer
from ..router import BI_LEVEL, SINGLE_LEVEL, RouterParams, RoutingBatch, route_batch
from .config import ScenarioConfig


@dataclass
class LayerRun:
    mode: str
    n: int
    decisions: RoutingBatch
    plan: DispatchPlan
    report: CostReport


def run_layer(cfg: ScenarioConfig, mode: str, n: int = None) -> LayerRun:
    n = cfg.n if n is None else n
    topo = cfg.topology(n)
    T = topo.N * cfg.sim_tokens_per_rank
    rng = np.random.default_rng([cfg.seed, n, cfg.m, cfg.hidden_size])
    tokens = rng.normal(size=(T, cfg.hidden_size))
    params = RouterParams.init(mode, n, cfg.m, cfg.hidden_size, seed=cfg.seed + 1)
    decisions = route_batch(params, tokens, n, cfg.m)
    plan = build_plan(
        decisions,
        topo,
        cfg.dispatch_config(),
        cfg.hidden_size,
        token_scale=cfg.tokens_per_rank / cfg.sim_tokens_per_rank,
    )
    report = simulate_layer(mode, topo, plan, cfg.intermediate_size, cfg.compute_rate)
    return LayerRun(mode, n, decisions, plan, report)


def micro_step_time(cfg: ScenarioConfig, report: CostReport) -> float:
    return cfg.moe_layers * report.total_time + cfg.num_layers * cfg.non_moe_layer_time


def _write_csv(columns: Sequence[str], rows: List[Dict[str, object]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


SCALING_COLUMNS = (
    "config_hash", "scaling", "mode", "nodes", "gpus", "global_batch", "micro_steps",
    "step_time_s", "samples_per_s", "tokens_per_s", "all2all_time_s", "dropped",
)


def scaling_rows(cfg: ScenarioConfig, node_list=None, scaling=None) -> List[Dict[str, object]]:
    node_list = tuple(cfg.nodes if node_list is None else node_list)
    scaling = cfg.scaling if scaling is None else scaling
    if not node_list or list(node_list) != sorted(node_list) or min(node_list) < 1:
        raise ValueError("node list must be ascending positive counts")
    if scaling not in ("weak", "strong"):
        raise ValueError(f"scaling must be weak or strong, got {scaling!r}")
    rows = []
    for mode in cfg.modes:
        for n in node_list:
            run = run_layer(cfg, mode, n)
            gpus = n * cfg.m
            per_micro = gpus * cfg.micro_batch_size
            if scaling == "weak":
                global_batch, micro_steps = per_micro, 1
            else:
                micro_steps = max(1, math.ceil(cfg.global_batch_size / per_micro))
                global_batch = cfg.global_batch_size
            step = micro_steps * micro_step_time(cfg, run.report) + cfg.step_overhead
            rows.append(
                {
                    "config_hash": cfg.config_hash(),
                    "scaling": scaling,
                    "mode": mode,
                    "nodes": n,
                    "gpus": gpus,
                    "global_batch": global_batch,
                    "micro_steps": micro_steps,
                    "step_time_s": step,
                    "samples_per_s": global_batch / step,
                    "tokens_per_s": global_batch * cfg.seq_len / step,
                    "all2all_time_s": run.report.all2all_time,
                    "dropped": run.plan.num_dropped,
                }
            )
    return rows


def run_scaling(cfg: ScenarioConfig, node_list=None, scaling=None) -> str:
    return _write_csv(SCALING_COLUMNS, scaling_rows(cfg, node_list, scaling))


# Model configurations of the 3.7B / 13B / 48B comparison (128 experts).
MODEL_SIZES = (
    ("3.7B", dict(micro_batch_size=128, num_layers=12, hidden_size=768, intermediate_size=3072)),
    ("13B", dict(micro_batch_size=64, num_layers=24, hidden_size=1024, intermediate_size=4096)),
    ("48B", dict(micro_batch_size=64, num_layers=36, hidden_size=1600, intermediate_size=6400)),
)

MODELSIZE_COLUMNS = (
    "config_hash", "name", "nodes", "micro_batch_size", "num_layers", "hidden_size",
    "intermediate_size", "single_step_s", "bi_step_s", "single_samples_per_s",
    "bi_samples_per_s", "ratio",
)


def model_size_rows(cfgs) -> List[Dict[str, object]]:
    rows = []
    for name, cfg in cfgs:
        steps = {}
        for mode in (SINGLE_LEVEL, BI_LEVEL):
            run = run_layer(cfg, mode)
            per_micro = cfg.n * cfg.m * cfg.micro_batch_size
            micro_steps = max(1, math.ceil(cfg.global_batch_size / per_micro))
            steps[mode] = micro_steps * micro_step_time(cfg, run.report) + cfg.step_overhead
        single = cfg.global_batch_size / steps[SINGLE_LEVEL]
        bi = cfg.global_batch_size / steps[BI_LEVEL]
        rows.append(
            {
                "config_hash": cfg.config_hash(),
                "name": name,
                "nodes": cfg.n,
                "micro_batch_size": cfg.micro_batch_size,
                "num_layers": cfg.num_layers,
                "hidden_size": cfg.hidden_size,
                "intermediate_size": cfg.intermediate_size,
                "single_step_s": steps[SINGLE_LEVEL],
                "bi_step_s": steps[BI_LEVEL],
                "single_samples_per_s": single,
                "bi_samples_per_s": bi,
                "ratio": bi / single,
            }
        )
    return rows


def default_model_sizes(base: ScenarioConfig):
    return [(name, base.replace(**knobs)) for name, knobs in MODEL_SIZES]


def run_model_size_sweep(cfgs) -> str:
    return _write_csv(MODELSIZE_COLUMNS, model_size_rows(cfgs))


BREAKDOWN_COLUMNS = (
    "config_hash", "mode", "phase", "launches", "messages", "bytes_inter", "bytes_intra",
    "time_s", "all2all_ratio", "dropped", "inter_lb", "intra_lb", "lb_total", "unscaled_lb",
)


def layer_losses(cfg: ScenarioConfig, run: LayerRun) -> Dict[str, float]:
    dec = run.decisions
    if run.mode == BI_LEVEL:
        stats = compute_stats(dec, run.n, cfg.m)
        inter, intra = lb_terms(stats, cfg.loss_config(BI_LEVEL))
        u_inter, u_intra = lb_terms(stats, LossConfig(1.0, 1.0))
        return {"inter_lb": inter, "intra_lb": intra, "lb_total": inter + intra,
                "unscaled_lb": u_inter + u_intra}
    f = dispatch_fractions(dec.expert, run.n * cfg.m)
    P = dec.probs.mean(axis=0)
    lb = single_level_lb_loss(f, P, cfg.switch_alpha)
    return {"inter_lb": lb, "intra_lb": 0.0, "lb_total": lb,
            "unscaled_lb": single_level_lb_loss(f, P, 1.0)}


def breakdown_rows(cfg: ScenarioConfig) -> List[Dict[str, object]]:
    rows = []
    h = cfg.config_hash()
    for mode in cfg.modes:
        run = run_layer(cfg, mode)
        rep = run.report
        common = {"config_hash": h, "mode": mode, "dropped": run.plan.num_dropped}
        common.update(layer_losses(cfg, run))
        for ph in rep.phases:
            rows.append(dict(common, phase=ph.phase, launches=ph.launches, messages=ph.messages,
                             bytes_inter=ph.bytes_inter, bytes_intra=ph.bytes_intra, time_s=ph.time_s))
        summary = [("all2all", rep.all2all_time), ("compute", rep.compute_time), ("total", rep.total_time)]
        if mode == BI_LEVEL:
            summary[1:1] = [("all2all_inter", rep.inter_time), ("all2all_intra", rep.intra_time)]
        for name, value in summary:
            rows.append(dict(common, phase=name, launches=rep.launches_per_rank if name == "all2all" else "",
                             messages=rep.total_messages if name == "all2all" else "",
                             bytes_inter=rep.bytes_inter if name == "all2all" else "",
                             bytes_intra=rep.bytes_intra if name == "all2all" else "",
                             time_s=value))
        rows.append(dict(common, phase="all2all_ratio", all2all_ratio=rep.all2all_ratio))
    return rows


def run_breakdown(cfg: ScenarioConfig) -> str:
    return _write_csv(BREAKDOWN_COLUMNS, breakdown_rows(cfg))


PIPELINE_COLUMNS = (
    "config_hash", "mode", "chunks", "all2all_ops", "comm_time_s", "compute_time_s", "total_time_s",
)


def _chunk_masks(plan: DispatchPlan, chunks: int) -> List[np.ndarray]:
    """Split each rank's tokens into ``chunks`` contiguous slices."""
    masks = [np.zeros(plan.T, dtype=bool) for _ in range(chunks)]
    for rank in range(plan.N):
        own = np.flatnonzero(plan.source == rank)
        for c, part in enumerate(np.array_split(own, chunks)):
            masks[c][part] = True
    return masks


def pipeline_time(cfg: ScenarioConfig, run: LayerRun, chunks: int) -> Dict[str, float]:
    """Overlap chunk ``c+1``'s communication with chunk ``c``'s expert compute.

    The network and the GPUs are two serial resources. The network runs all
    dispatches in chunk order, then the returns; a chunk computes once its
    dispatch lands and returns once computed.
    """
    plan = run.plan
    if chunks < 1 or chunks > cfg.sim_tokens_per_rank:
        raise ValueError(f"chunks must be in [1, {cfg.sim_tokens_per_rank}], got {chunks}")
    topo = cfg.topology(run.n)
    half = phases_per_layer(plan.mode) // 2
    masks = _chunk_masks(plan, chunks)
    dispatch_t, return_t, compute_t = [], [], []
    for mask in masks:
        sched = build_schedule(plan, mask)
        costs = [simulate_all2all(desc, topo).time_s for desc in sched]
        dispatch_t.append(sum(costs[:half]))
        return_t.append(sum(costs[half:]))
        admitted = np.bincount(
            (plan.routed_node * plan.m + plan.routed_local)[mask & ~plan.dropped], minlength=plan.N
        )
        compute_t.append(compute_time(admitted, plan.d, cfg.intermediate_size, cfg.compute_rate, plan.token_scale)[0])

    net = 0.0
    dispatched = []
    for t in dispatch_t:
        net += t
        dispatched.append(net)
    gpu = 0.0
    computed = []
    for ready, t in zip(dispatched, compute_t):
        gpu = max(gpu, ready) + t
        computed.append(gpu)
    for ready, t in zip(computed, return_t):
        net = max(net, ready) + t
    return {
        "all2all_ops": chunks * phases_per_layer(plan.mode),
        "comm_time_s": sum(dispatch_t) + sum(return_t),
        "compute_time_s": sum(compute_t),
        "total_time_s": net,
    }


def pipeline_rows(cfg: ScenarioConfig, chunk_list=None) -> List[Dict[str, object]]:
    chunk_list = tuple(cfg.chunks if chunk_list is None else chunk_list)
    rows = []
    for mode in cfg.modes:
        run = run_layer(cfg, mode)
        for c in chunk_list:
            rows.append(dict(config_hash=cfg.config_hash(), mode=mode, chunks=c, **pipeline_time(cfg, run, c)))
    return rows


def run_pipeline(cfg: ScenarioConfig, chunk_list=None) -> str:
    return _write_csv(PIPELINE_COLUMNS, pipeline_rows(cfg, chunk_list))
