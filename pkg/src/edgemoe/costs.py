"""Roofline-style latency proxy shared by the planner and the simulator."""

from __future__ import annotations

from dataclasses import dataclass

from .edgenet import EdgeTopology, ServerSpec
from .errors import ConfigError
from .model import MoEModelSpec


@dataclass
class CostModel:
    flops_per_param: float = 2.0
    # fraction of peak FLOP/s actually achieved
    compute_efficiency: float = 0.4
    # scale activation transfer bytes by the destination expert's bits/16
    activation_quant: bool = True
    # low-precision experts compute proportionally faster (off: hardware dependent)
    low_precision_speedup: bool = False
    alpha_latency: float = 1.0
    # None: use the mean single-link boundary transfer time
    beta_frequency: float | None = None
    low_water_pct: float = 20.0
    queue_clamp: float = 100.0

    def __post_init__(self):
        if self.flops_per_param <= 0:
            raise ConfigError("must be > 0", "cost.flops_per_param")
        if not 0 < self.compute_efficiency <= 1:
            raise ConfigError("must be in (0, 1]", "cost.compute_efficiency")
        if self.queue_clamp < 1:
            raise ConfigError("must be >= 1", "cost.queue_clamp")

    def _flop_time(self, params: float, n_tokens: int, server: ServerSpec) -> float:
        return n_tokens * params * self.flops_per_param / (server.compute_rate * self.compute_efficiency)

    @staticmethod
    def _read_time(nbytes: float, server: ServerSpec) -> float:
        return nbytes / server.mem_bandwidth if server.mem_bandwidth > 0 else 0.0

    def expert_time(self, spec: MoEModelSpec, server: ServerSpec, n_tokens: int = 1, bits: int = 16) -> float:
        """One expert invocation over a batch of ``n_tokens`` (0 tokens costs nothing)."""
        if n_tokens <= 0:
            return 0.0
        scale = bits / 16
        flops = self._flop_time(spec.expert_params, n_tokens, server)
        if self.low_precision_speedup:
            flops *= scale
        return flops + self._read_time(spec.expert_param_bytes * scale, server)

    def shared_time(self, spec: MoEModelSpec, server: ServerSpec, n_tokens: int = 1, bits: int = 16) -> float:
        """Non-expert (attention/dense) work of one layer for a batch."""
        if n_tokens <= 0:
            return 0.0
        scale = bits / 16
        flops = self._flop_time(spec.shared_params_per_layer, n_tokens, server)
        if self.low_precision_speedup:
            flops *= scale
        return flops + self._read_time(spec.shared_param_bytes / spec.num_layers * scale, server)

    def activation_bytes(self, spec: MoEModelSpec, bits: int = 16) -> float:
        b = spec.token_activation_bytes
        return b * bits / 16 if self.activation_quant else float(b)

    def beta(self, spec: MoEModelSpec, topology: EdgeTopology) -> float:
        if self.beta_frequency is not None:
            return self.beta_frequency
        if not topology.links:
            return 0.0
        nbytes = spec.token_activation_bytes
        times = [ln.latency + nbytes / ln.bandwidth for ln in topology.links]
        return sum(times) / len(times)
