"""Load-balancing statistics and auxiliary losses.

The bi-level loss adds two dot-product terms, one over nodes and one over
local GPU slots::

    alpha * n * sum_i f_i P_i  +  beta * m * sum_j f_j Q_j

``f`` are argmax dispatch fractions (held constant when differentiating),
``P``/``Q`` are mean router probabilities over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .router import BI_LEVEL, RouterParams, RoutingBatch, softmax

DEFAULT_ALPHA = 0.005
DEFAULT_BETA = 0.005
SWITCH_ALPHA = 0.01


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


@dataclass(frozen=True)
class BalanceStats:
    f_nodes: np.ndarray
    P_nodes: np.ndarray
    f_local: np.ndarray
    Q_local: np.ndarray
    T: int


def dispatch_fractions(assignments: np.ndarray, k: int) -> np.ndarray:
    assignments = np.asarray(assignments)
    if assignments.size == 0:
        raise ValueError("dispatch fractions need at least one token")
    return np.bincount(assignments, minlength=k).astype(np.float64) / assignments.size


def compute_stats(decisions: RoutingBatch, n: int, m: int) -> BalanceStats:
    if decisions.mode != BI_LEVEL:
        raise ValueError("compute_stats expects bi-level decisions")
    T = decisions.T
    if T == 0:
        raise ValueError("compute_stats needs T >= 1")
    if decisions.probs.shape[1] != n or decisions.local_probs.shape[1] != m:
        raise ValueError("decision shapes do not match (n, m)")
    return BalanceStats(
        f_nodes=dispatch_fractions(decisions.node, n),
        P_nodes=decisions.probs.mean(axis=0),
        f_local=dispatch_fractions(decisions.local, m),
        Q_local=decisions.local_probs.mean(axis=0),
        T=T,
    )


def single_level_lb_loss(f: np.ndarray, P: np.ndarray, alpha: float) -> float:
    f = np.asarray(f, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    return float(alpha * len(f) * np.dot(f, P))


def lb_terms(stats: BalanceStats, cfg: LossConfig) -> Tuple[float, float]:
    """Return ``(inter, intra)`` components of the bi-level loss."""
    inter = single_level_lb_loss(stats.f_nodes, stats.P_nodes, cfg.alpha)
    intra = single_level_lb_loss(stats.f_local, stats.Q_local, cfg.beta)
    return inter, intra


def lb_loss(stats: BalanceStats, cfg: LossConfig) -> float:
    inter, intra = lb_terms(stats, cfg)
    return inter + intra


def total_loss(train_loss: float, per_layer_lb: Sequence[float]) -> float:
    values = [float(train_loss), *map(float, per_layer_lb)]
    if not all(math.isfinite(v) for v in values):
        raise ValueError("total_loss inputs must be finite")
    return math.fsum(values)


def _term_grad(W: np.ndarray, x: np.ndarray, f: np.ndarray, coef: float) -> np.ndarray:
    # d/dlogit_k of coef * K * mean_t sum_i f_i p_i = coef*K/T * p_k (f_k - f.p)
    T = x.shape[0]
    K = W.shape[0]
    p = softmax(x @ W.T)
    g = p * (f[None, :] - (p @ f)[:, None])
    return (coef * K / T) * (g.T @ x)


def lb_loss_gradient(
    params: RouterParams,
    x: np.ndarray,
    cfg: LossConfig,
    node_assign: Optional[np.ndarray] = None,
    local_assign: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the bi-level loss w.r.t. ``(W_p, W_q)``.

    Assignments default to the argmax of the current router. They enter only
    through the (constant) dispatch fractions.
    """
    if params.mode != BI_LEVEL:
        raise ValueError("lb_loss_gradient expects a bi-level router")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d or x.shape[0] == 0:
        raise ValueError(f"tokens must be (T>=1, {params.d}), got {x.shape}")
    n, m = params.W_p.shape[0], params.W_q.shape[0]
    if node_assign is None:
        node_assign = np.argmax(softmax(x @ params.W_p.T), axis=1)
    if local_assign is None:
        local_assign = np.argmax(softmax(x @ params.W_q.T), axis=1)
    if len(node_assign) != x.shape[0] or len(local_assign) != x.shape[0]:
        raise ValueError("one assignment per token is required")
    f_nodes = dispatch_fractions(node_assign, n)
    f_local = dispatch_fractions(local_assign, m)
    return (
        _term_grad(params.W_p, x, f_nodes, cfg.alpha),
        _term_grad(params.W_q, x, f_local, cfg.beta),
    )


def lb_loss_fixed_assignments(
    W_p: np.ndarray,
    W_q: np.ndarray,
    x: np.ndarray,
    cfg: LossConfig,
    node_assign: np.ndarray,
    local_assign: np.ndarray,
) -> float:
    """Bi-level loss with dispatch fractions frozen to the given assignments."""
    n, m = W_p.shape[0], W_q.shape[0]
    stats = BalanceStats(
        f_nodes=dispatch_fractions(node_assign, n),
        P_nodes=softmax(x @ W_p.T).mean(axis=0),
        f_local=dispatch_fractions(local_assign, m),
        Q_local=softmax(x @ W_q.T).mean(axis=0),
        T=x.shape[0],
    )
    return lb_loss(stats, cfg)


def central_difference(fn, W: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Entry-wise central difference of scalar ``fn`` at ``W``."""
    grad = np.zeros_like(W, dtype=np.float64)
    for idx in np.ndindex(W.shape):
        up, down = W.copy(), W.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in Frobenius norm.

    The floor keeps the ratio meaningful at stationary points, where both
    gradients are zero up to finite-difference round-off (~1e-11 here).
    """
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))
