"""Softmax routers: single-level top-k and bi-level (node, then GPU) top-1.

All math is float64. Argmax ties resolve to the lowest index unless a
caller explicitly asks for ``tie_break="highest"`` (used only for fault
injection in the verification harness).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

SINGLE_LEVEL = "single_level"
BI_LEVEL = "bi_level"
MODES = (SINGLE_LEVEL, BI_LEVEL)


class MacCounter:
    """Tallies multiply-accumulates from the operand shapes actually used."""

    def __init__(self):
        self.macs = 0

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = a @ b
        inner = a.shape[-1]
        self.macs += int(np.prod(out.shape, dtype=np.int64)) * int(inner)
        return out


def _matmul(a, b, counter):
    return counter.matmul(a, b) if counter is not None else a @ b


@dataclass(frozen=True)
class RouterParams:
    mode: str
    d: int
    W_r: Optional[np.ndarray] = None
    W_p: Optional[np.ndarray] = None
    W_q: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode == SINGLE_LEVEL:
            if self.W_r is None or self.W_r.ndim != 2 or self.W_r.shape[1] != self.d:
                raise ValueError("single-level router needs W_r of shape (N, d)")
        elif self.mode == BI_LEVEL:
            for name in ("W_p", "W_q"):
                w = getattr(self, name)
                if w is None or w.ndim != 2 or w.shape[1] != self.d:
                    raise ValueError(f"bi-level router needs {name} of shape (*, d)")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def init(cls, mode: str, n: int, m: int, d: int, seed: int = 0, scale: float = 1.0):
        """Gaussian init with std ``scale / sqrt(d)`` so logits are O(1)."""
        rng = np.random.default_rng(seed)
        std = scale / np.sqrt(d)
        if mode == SINGLE_LEVEL:
            return cls(mode, d, W_r=rng.normal(0.0, std, size=(n * m, d)))
        if mode == BI_LEVEL:
            W_p = rng.normal(0.0, std, size=(n, d))
            W_q = rng.normal(0.0, std, size=(m, d))
            return cls(mode, d, W_p=W_p, W_q=W_q)
        raise ValueError(f"unknown mode {mode!r}")

    @property
    def param_count(self) -> int:
        if self.mode == SINGLE_LEVEL:
            return int(self.W_r.size)
        return int(self.W_p.size + self.W_q.size)


def param_count(mode: str, n: int, m: int, d: int) -> int:
    if mode == SINGLE_LEVEL:
        return n * m * d
    if mode == BI_LEVEL:
        return (n + m) * d
    raise ValueError(f"unknown mode {mode!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] == 0:
        raise ValueError("softmax over zero experts")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite router logits")
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def compute_probabilities(W: np.ndarray, x: np.ndarray, counter: Optional[MacCounter] = None):
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0:
        raise ValueError("router weight must be a non-empty (K, d) matrix")
    return softmax(_matmul(W, x, counter))


def argmax(probs: np.ndarray, tie_break: str = "lowest") -> np.ndarray:
    """Argmax over the last axis with an explicit tie rule."""
    probs = np.asarray(probs)
    if tie_break == "lowest":
        return np.argmax(probs, axis=-1)
    if tie_break == "highest":
        k = probs.shape[-1]
        return k - 1 - np.argmax(probs[..., ::-1], axis=-1)
    raise ValueError(f"unknown tie_break {tie_break!r}")


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if not 1 <= k <= probs.shape[-1]:
        raise ValueError(f"k must be in [1, {probs.shape[-1]}], got {k}")
    # stable sort on -p keeps lower indices first among equals
    return np.argsort(-probs, kind="stable")[:k]


def top_k_combine(probs: np.ndarray, k: int, expert_outputs: np.ndarray) -> np.ndarray:
    """Sum of ``p_e * E_e(x)`` over the ``k`` most probable experts."""
    expert_outputs = np.asarray(expert_outputs, dtype=np.float64)
    if expert_outputs.shape[0] != len(probs):
        raise ValueError("need one expert output per probability")
    chosen = top_k_indices(probs, k)
    y = np.zeros(expert_outputs.shape[1:], dtype=np.float64)
    for e in chosen:
        y = y + probs[e] * expert_outputs[e]
    return y


@dataclass(frozen=True)
class RoutingDecision:
    """Routing result for one token.

    Single-level decisions leave ``local``/``local_probs`` unset and ``node``
    holds the flat expert index.
    """

    probs: np.ndarray
    node: int
    gate: float
    local_probs: Optional[np.ndarray] = None
    local: Optional[int] = None


def bi_level_route(W_p, W_q, x, tie_break: str = "lowest", counter=None) -> RoutingDecision:
    p = compute_probabilities(W_p, x, counter)
    q = compute_probabilities(W_q, x, counter)
    i = int(argmax(p, tie_break))
    j = int(argmax(q, tie_break))
    return RoutingDecision(probs=p, node=i, gate=float(p[i] * q[j]), local_probs=q, local=j)


def single_level_route(W_r, x, tie_break: str = "lowest", counter=None) -> RoutingDecision:
    p = compute_probabilities(W_r, x, counter)
    e = int(argmax(p, tie_break))
    return RoutingDecision(probs=p, node=e, gate=float(p[e]))


@dataclass(frozen=True)
class RoutingBatch:
    """Top-1 routing of ``T`` tokens, as parallel arrays.

    ``node``/``local`` are destination coordinates; for single-level mode
    they are derived from the flat expert index (``expert // m``,
    ``expert % m``) and ``probs`` is the ``(T, N)`` expert distribution.
    For bi-level mode ``probs`` is ``(T, n)`` and ``local_probs`` is ``(T, m)``.
    """

    mode: str
    n: int
    m: int
    probs: np.ndarray
    node: np.ndarray
    local: np.ndarray
    gate: np.ndarray
    local_probs: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return int(self.gate.shape[0])

    @property
    def expert(self) -> np.ndarray:
        return self.node * self.m + self.local


def route_batch(
    params: RouterParams,
    x: np.ndarray,
    n: int,
    m: int,
    tie_break: str = "lowest",
    counter: Optional[MacCounter] = None,
) -> RoutingBatch:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d:
        raise ValueError(f"tokens must be (T, {params.d}), got {x.shape}")
    if params.mode == SINGLE_LEVEL:
        if params.W_r.shape[0] != n * m:
            raise ValueError("W_r rows must equal n*m")
        probs = softmax(_matmul(x, params.W_r.T, counter))
        expert = argmax(probs, tie_break)
        gate = np.take_along_axis(probs, expert[:, None], axis=1)[:, 0]
        return RoutingBatch(SINGLE_LEVEL, n, m, probs, expert // m, expert % m, gate)
    if params.W_p.shape[0] != n or params.W_q.shape[0] != m:
        raise ValueError("W_p/W_q rows must equal n/m")
    p = softmax(_matmul(x, params.W_p.T, counter))
    q = softmax(_matmul(x, params.W_q.T, counter))
    node = argmax(p, tie_break)
    local = argmax(q, tie_break)
    rows = np.arange(x.shape[0])
    gate = p[rows, node] * q[rows, local]
    return RoutingBatch(BI_LEVEL, n, m, p, node, local, gate, local_probs=q)


def routing_flops(mode: str, n: int, m: int, T: int, d: int, k: int = 1) -> int:
    """Exact logit MACs for a batch; top-k selection adds no MACs."""
    if mode == SINGLE_LEVEL:
        return n * m * T * d
    if mode == BI_LEVEL:
        return (n + m) * T * d
    raise ValueError(f"unknown mode {mode!r}")


def stack_decisions(decisions: Sequence[RoutingDecision], n: int, m: int) -> RoutingBatch:
    """Assemble per-token bi-level decisions into a batch."""
    probs = np.stack([dec.probs for dec in decisions])
    q = np.stack([dec.local_probs for dec in decisions])
    node = np.array([dec.node for dec in decisions], dtype=np.int64)
    local = np.array([dec.local for dec in decisions], dtype=np.int64)
    gate = np.array([dec.gate for dec in decisions], dtype=np.float64)
    return RoutingBatch(BI_LEVEL, n, m, probs, node, local, gate, local_probs=q)
