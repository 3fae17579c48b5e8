"""Feed-forward experts ``E_{i,j}(x) = GELU(x W1 + b1) W2 + b2``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import erf


def gelu(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


@dataclass(frozen=True)
class Expert:
    W1: np.ndarray  # (d, d_ff)
    b1: np.ndarray
    W2: np.ndarray  # (d_ff, d)
    b2: np.ndarray

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def d_ff(self) -> int:
        return self.W1.shape[1]


def expert_forward(expert: Expert, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != expert.d:
        raise ValueError(f"expected last dim {expert.d}, got {x.shape[-1]}")
    return gelu(x @ expert.W1 + expert.b1) @ expert.W2 + expert.b2


def expert_macs(d: int, d_ff: int) -> int:
    """Multiply-accumulates for one token through one expert (biases excluded)."""
    return 2 * d * d_ff


@dataclass(frozen=True)
class ExpertBank:
    n: int
    m: int
    experts: Tuple[Expert, ...]

    def __getitem__(self, key: Tuple[int, int]) -> Expert:
        i, j = key
        if not (0 <= i < self.n and 0 <= j < self.m):
            raise IndexError(f"expert ({i}, {j}) outside {self.n}x{self.m} bank")
        return self.experts[i * self.m + j]

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.experts[0].d

    @property
    def d_ff(self) -> int:
        return self.experts[0].d_ff


def init_bank(seed: int, n: int, m: int, d: int, d_ff: int) -> ExpertBank:
    """Uniform fan-in init from ``numpy.random.default_rng(seed)`` (PCG64).

    Experts are drawn in rank order (node-major); each draws W1 then W2.
    Biases start at zero.
    """
    if min(n, m, d, d_ff) < 1:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(d)
    lim2 = 1.0 / np.sqrt(d_ff)
    experts = []
    for _ in range(n * m):
        W1 = rng.uniform(-lim1, lim1, size=(d, d_ff))
        W2 = rng.uniform(-lim2, lim2, size=(d_ff, d))
        experts.append(Expert(W1, np.zeros(d_ff), W2, np.zeros(d)))
    return ExpertBank(n, m, tuple(experts))
