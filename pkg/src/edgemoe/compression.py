"""Per-expert bit-width policy, token fusion, token pruning and the quality proxy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleError
from .model import ExpertRef, MoEModelSpec

BIT_WIDTHS = (4, 8, 16)
DEFAULT_QUANT_PENALTY = {16: 0.0, 8: 0.001, 4: 0.005}


def quantized_bytes(nbytes: float, bits: int) -> float:
    return nbytes * bits / 16


@dataclass
class QuantPolicy:
    """Bit-width of every placed expert copy, keyed by (server, expert).

    Replicas on different servers may carry different precisions, which is
    what lets a peer serve a higher-precision copy during an upgrade.
    """

    bits: dict[tuple[int, ExpertRef], int] = field(default_factory=dict)
    shared_bits: int = 16
    penalty_table: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_QUANT_PENALTY))

    def __post_init__(self):
        if self.shared_bits not in BIT_WIDTHS:
            raise ConfigError("must be one of 4, 8, 16", "quant.shared_bits")
        for key, b in self.bits.items():
            if b not in BIT_WIDTHS:
                raise ConfigError(f"bit-width {b} for {key} not in {BIT_WIDTHS}", "quant.bits")

    def bits_of(self, server: int, expert: ExpertRef, default: int | None = None) -> int:
        b = self.bits.get((server, expert), default)
        if b is None:
            raise KeyError(f"no bit-width for {expert} on server {server}")
        return b

    def expert_bytes(self, spec: MoEModelSpec, server: int, expert: ExpertRef) -> float:
        return quantized_bytes(spec.expert_param_bytes, self.bits_of(server, expert))

    def shared_bytes(self, spec: MoEModelSpec) -> float:
        return quantized_bytes(spec.shared_param_bytes, self.shared_bits)

    def server_expert_bytes(self, spec: MoEModelSpec, server: int, experts) -> float:
        return sum(self.expert_bytes(spec, server, e) for e in experts)

    @classmethod
    def uniform(cls, placement, bits: int = 16, shared_bits: int = 16, penalty_table=None) -> "QuantPolicy":
        table = dict(DEFAULT_QUANT_PENALTY if penalty_table is None else penalty_table)
        return cls(
            {(s, e): bits for s, experts in placement.assignment.items() for e in experts},
            shared_bits,
            table,
        )

    def to_json(self) -> dict:
        by_server: dict[str, list] = {}
        for (s, e), b in sorted(self.bits.items()):
            by_server.setdefault(str(s), []).append([e.layer, e.expert, b])
        return {
            "shared_bits": self.shared_bits,
            "penalty_table": {str(k): v for k, v in sorted(self.penalty_table.items())},
            "bits": by_server,
        }

    @classmethod
    def from_json(cls, d: dict) -> "QuantPolicy":
        bits = {}
        for s, rows in d["bits"].items():
            for layer, expert, b in rows:
                bits[(int(s), ExpertRef(layer, expert))] = b
        table = {int(k): float(v) for k, v in d.get("penalty_table", DEFAULT_QUANT_PENALTY).items()}
        return cls(bits, d.get("shared_bits", 16), table)


class _UniformBits(QuantPolicy):
    """Every copy at one width; used by the planner before bit-widths exist."""

    def __init__(self, bits: int, shared_bits: int = 16):
        super().__init__({}, shared_bits)
        self.default_bits = bits

    def bits_of(self, server, expert, default=None):
        return self.bits.get((server, expert), self.default_bits)


def uniform_bits(bits: int, shared_bits: int = 16) -> QuantPolicy:
    return _UniformBits(bits, shared_bits)


def assign_bitwidths(popularity, placement, spec: MoEModelSpec, budgets: dict[int, float],
                     shared_bits: int = 16, penalty_table=None) -> QuantPolicy:
    """Greedy mixed precision per server.

    Experts are visited in descending popularity and get the widest bit-width
    that still leaves room for every remaining expert at 4 bits; widths never
    increase along the order, so a more popular expert never ends up narrower.
    ``popularity`` is anything with a ``score(expert)`` method.
    """
    bits: dict[tuple[int, ExpertRef], int] = {}
    size = spec.expert_param_bytes
    for server in sorted(placement.assignment):
        experts = sorted(placement.assignment[server], key=lambda e: (-popularity.score(e), e))
        budget = budgets[server]
        if budget <= 0:
            raise ConfigError("budget must be > 0", f"budgets[{server}]")
        floor = quantized_bytes(size, 4) * len(experts)
        if floor > budget:
            raise InfeasibleError(f"server {server} cannot hold its experts even at 4 bits", floor - budget)
        used = 0.0
        cap = 16
        for i, e in enumerate(experts):
            rest = quantized_bytes(size, 4) * (len(experts) - i - 1)
            for b in (16, 8, 4):
                if b <= cap and used + quantized_bytes(size, b) + rest <= budget:
                    break
            cap = b
            used += quantized_bytes(size, b)
            bits[(server, e)] = b
    table = dict(DEFAULT_QUANT_PENALTY if penalty_table is None else penalty_table)
    return QuantPolicy(bits, shared_bits, table)


@dataclass
class FusionConfig:
    threshold: float = 0.95
    penalty: float = 0.002
    enabled: bool = False

    def __post_init__(self):
        if not -1 <= self.threshold <= 1:
            raise ConfigError("must be in [-1, 1]", "compression.fusion.threshold")


@dataclass
class FusionResult:
    centroids: np.ndarray
    membership: list[int]
    group_sizes: list[int]
    saved_bytes: float
    penalty: float

    @property
    def groups(self) -> int:
        return len(self.group_sizes)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))


def fuse_tokens(vectors: np.ndarray, config: FusionConfig, bytes_per_token: float) -> FusionResult:
    """Greedy first-fit clustering by centroid cosine similarity (order dependent)."""
    vectors = np.asarray(vectors, dtype=float)
    n = len(vectors)
    if n == 0:
        dim = vectors.shape[1] if vectors.ndim == 2 else 0
        return FusionResult(np.empty((0, dim)), [], [], 0.0, 0.0)
    if not config.enabled:
        return FusionResult(vectors.copy(), list(range(n)), [1] * n, 0.0, 0.0)
    sums: list[np.ndarray] = []
    sizes: list[int] = []
    membership = []
    for v in vectors:
        for g, s in enumerate(sums):
            if _cos(s / sizes[g], v) >= config.threshold:
                sums[g] = s + v
                sizes[g] += 1
                membership.append(g)
                break
        else:
            sums.append(v.copy())
            sizes.append(1)
            membership.append(len(sizes) - 1)
    centroids = np.array([s / c for s, c in zip(sums, sizes)])
    merged = n - len(sizes)
    return FusionResult(centroids, membership, sizes, merged * bytes_per_token, merged * config.penalty)


@dataclass
class PruneConfig:
    threshold: float | None = None
    fraction: float | None = None
    penalty: float = 0.01
    enabled: bool = False

    def __post_init__(self):
        if self.enabled and (self.threshold is None) == (self.fraction is None):
            raise ConfigError("exactly one of threshold / fraction must be set", "compression.prune")
        if self.threshold is not None and not 0 <= self.threshold <= 1:
            raise ConfigError("must be in [0, 1]", "compression.prune.threshold")
        if self.fraction is not None and not 0 <= self.fraction <= 1:
            raise ConfigError("must be in [0, 1]", "compression.prune.fraction")


@dataclass
class PruneResult:
    retained: list[int]
    pruned: list[int]
    saved_bytes: float
    penalty: float


def prune_tokens(importance, config: PruneConfig, bytes_per_token: float = 0.0,
                 token_ids=None) -> PruneResult:
    """Drop low-importance tokens; retained positions keep their original order."""
    scores = np.asarray(importance, dtype=float)
    n = len(scores)
    ids = list(range(n)) if token_ids is None else list(token_ids)
    if not config.enabled or n == 0:
        return PruneResult(list(range(n)), [], 0.0, 0.0)
    if config.threshold is not None:
        drop = {i for i in range(n) if scores[i] < config.threshold}
    else:
        m = int(np.floor(config.fraction * n))
        order = sorted(range(n), key=lambda i: (scores[i], ids[i]))
        drop = set(order[:m])
    retained = [i for i in range(n) if i not in drop]
    pruned = [i for i in range(n) if i in drop]
    return PruneResult(retained, pruned, len(pruned) * bytes_per_token, len(pruned) * config.penalty)


@dataclass
class PenaltyLedger:
    """Running penalty sums of one simulation, normalised by token count."""

    tokens: int = 0
    quantization: float = 0.0
    fusion: float = 0.0
    pruning: float = 0.0
    fused_tokens: int = 0
    pruned_tokens: int = 0
    activations_by_bits: dict[int, int] = field(default_factory=lambda: {b: 0 for b in BIT_WIDTHS})

    def add_activation(self, bits: int, table: dict[int, float]) -> None:
        self.activations_by_bits[bits] = self.activations_by_bits.get(bits, 0) + 1
        self.quantization += table.get(bits, 0.0)

    def as_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "quantization": self.quantization,
            "fusion": self.fusion,
            "pruning": self.pruning,
            "fused_tokens": self.fused_tokens,
            "pruned_tokens": self.pruned_tokens,
            "activations_by_bits": {str(k): v for k, v in sorted(self.activations_by_bits.items())},
        }


def quality_score(ledger: PenaltyLedger) -> float:
    """Product over penalty kinds of (1 - per-token penalty), clamped to [0, 1]."""
    if ledger.tokens <= 0:
        return 1.0
    score = 1.0
    for total in (ledger.quantization, ledger.fusion, ledger.pruning):
        score *= min(1.0, max(0.0, 1.0 - total / ledger.tokens))
    return score
