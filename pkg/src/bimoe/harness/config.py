"""Flat ``key = value`` scenario configuration.

Blank lines and ``#`` comments are ignored. List-valued keys take comma
separated integers. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from ..balance import LossConfig
from ..dispatch import DispatchConfig
from ..topology import ClusterTopology

MODES = ("single_level", "bi_level", "both")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "both"
    # cluster
    n: int = 16
    m: int = 8
    intra_bw: float = 600e9
    inter_bw: float = 50e9
    launch_overhead: float = 3.0e-3
    bisection_capacity: float = 192.0
    compute_rate: float = 1.0e14
    # model (the 3.7B row of the model-size table)
    hidden_size: int = 768
    intermediate_size: int = 3072
    num_layers: int = 12
    moe_every: int = 2
    micro_batch_size: int = 128
    seq_len: int = 128
    global_batch_size: int = 16384
    non_moe_layer_time: float = 5.0e-4
    step_overhead: float = 1.0e-2
    # routing / dispatch
    capacity_factor: float = 2.0
    bytes_per_element: int = 2
    alpha: float = 0.005
    beta: float = 0.005
    switch_alpha: float = 0.01
    sim_tokens_per_rank: int = 16
    seed: int = 0
    # sweeps
    scaling: str = "weak"
    nodes: Tuple[int, ...] = (1, 2, 4, 8, 16)
    chunks: Tuple[int, ...] = (1, 2, 4, 8, 16)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scaling not in ("weak", "strong"):
            raise ConfigError(f"scaling must be weak or strong, got {self.scaling!r}")
        positive = (
            "n", "m", "intra_bw", "inter_bw", "bisection_capacity", "compute_rate",
            "hidden_size", "intermediate_size", "num_layers", "moe_every",
            "micro_batch_size", "seq_len", "global_batch_size", "capacity_factor",
            "bytes_per_element", "sim_tokens_per_rank",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("launch_overhead", "non_moe_layer_time", "step_overhead", "alpha", "beta", "switch_alpha"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.intra_bw < self.inter_bw:
            raise ConfigError("intra_bw must be >= inter_bw")
        if self.sim_tokens_per_rank > self.tokens_per_rank:
            raise ConfigError("sim_tokens_per_rank cannot exceed micro_batch_size * seq_len")
        if not self.nodes or any(k < 1 for k in self.nodes) or list(self.nodes) != sorted(self.nodes):
            raise ConfigError("nodes must be a non-empty ascending list of positive counts")
        if not self.chunks or any(c < 1 for c in self.chunks):
            raise ConfigError("chunks must be positive")

    @property
    def tokens_per_rank(self) -> int:
        return self.micro_batch_size * self.seq_len

    @property
    def moe_layers(self) -> int:
        return self.num_layers // self.moe_every

    @property
    def modes(self) -> Tuple[str, ...]:
        return ("single_level", "bi_level") if self.mode == "both" else (self.mode,)

    def topology(self, n: Optional[int] = None) -> ClusterTopology:
        return ClusterTopology(
            n=self.n if n is None else n,
            m=self.m,
            intra_bw=self.intra_bw,
            inter_bw=self.inter_bw,
            launch_overhead=self.launch_overhead,
            bisection_capacity=self.bisection_capacity,
        )

    def dispatch_config(self) -> DispatchConfig:
        return DispatchConfig(capacity_factor=self.capacity_factor, bytes_per_element=self.bytes_per_element)

    def loss_config(self, mode: str) -> LossConfig:
        if mode == "single_level":
            return LossConfig(alpha=self.switch_alpha, beta=0.0)
        return LossConfig(alpha=self.alpha, beta=self.beta)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}


def _coerce(key: str, raw: str):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigError(f"unknown config key {key!r}")
    default = f.default
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_pairs(lines: Iterable[str]) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: Iterable[str] = ()) -> ScenarioConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    values: Dict[str, object] = {}
    if path is not None:
        values.update(parse_pairs(Path(path).read_text().splitlines()))
    values.update(parse_pairs(overrides))
    try:
        return ScenarioConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
