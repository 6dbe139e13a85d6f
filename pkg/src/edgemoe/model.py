"""MoE model geometry, synthetic routing traces and co-activation statistics."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, StructuralError

TRACE_FORMAT = "edgemoe-trace"
TRACE_VERSION = 1

# weights are stored at 16 bits when unquantized
FULL_PRECISION_BITS = 16
BYTES_PER_PARAM_FULL = FULL_PRECISION_BITS // 8


@dataclass(frozen=True)
class MoEModelSpec:
    num_layers: int
    experts_per_layer: int
    expert_param_bytes: int
    shared_param_bytes: int
    top_k: int
    hidden_dim: int
    activation_bytes_per_element: int = 2

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("must be >= 1", "model.num_layers")
        if self.experts_per_layer < 1:
            raise ConfigError("must be >= 1", "model.experts_per_layer")
        if not 1 <= self.top_k <= self.experts_per_layer:
            raise ConfigError("must satisfy 1 <= top_k <= experts_per_layer", "model.top_k")
        if self.expert_param_bytes <= 0:
            raise ConfigError("must be > 0", "model.expert_param_bytes")
        if self.shared_param_bytes < 0:
            raise ConfigError("must be >= 0", "model.shared_param_bytes")
        if self.hidden_dim < 1 or self.activation_bytes_per_element < 1:
            raise ConfigError("must be >= 1", "model.hidden_dim")

    @property
    def num_experts(self) -> int:
        return self.num_layers * self.experts_per_layer

    @property
    def total_bytes(self) -> int:
        return self.shared_param_bytes + self.num_experts * self.expert_param_bytes

    @property
    def expert_params(self) -> float:
        return self.expert_param_bytes / BYTES_PER_PARAM_FULL

    @property
    def shared_params_per_layer(self) -> float:
        return self.shared_param_bytes / BYTES_PER_PARAM_FULL / self.num_layers

    @property
    def token_activation_bytes(self) -> int:
        """Bytes of one token's hidden state at full activation precision."""
        return self.hidden_dim * self.activation_bytes_per_element

    def experts(self):
        for layer in range(self.num_layers):
            for expert in range(self.experts_per_layer):
                yield ExpertRef(layer, expert)

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ExpertRef(NamedTuple):
    layer: int
    expert: int

    def check(self, spec: MoEModelSpec) -> None:
        if not (0 <= self.layer < spec.num_layers and 0 <= self.expert < spec.experts_per_layer):
            raise StructuralError(f"{self} outside model bounds")


@dataclass
class RequestGroup:
    input_len: int
    output_len: int
    count: int = 1


@dataclass
class WorkloadParams:
    """Request mix plus the routing-skew knobs.

    Either list ``requests`` explicitly or set ``num_requests`` and draw lengths
    uniformly from the two inclusive ranges.
    """

    requests: list[RequestGroup] = field(default_factory=list)
    num_requests: int = 0
    input_len_range: tuple[int, int] = (128, 128)
    output_len_range: tuple[int, int] = (128, 128)
    zipf_s: float = 1.0
    concentration: float = 2.0
    # 0 means closed loop: the next request arrives when the previous finishes
    arrival_interval_s: float = 0.0
    # requests with index >= this use a rotated first-layer popularity
    shift_after_requests: int | None = None

    def validate(self) -> None:
        if self.zipf_s < 0:
            raise ConfigError("Zipf exponent must be >= 0", "workload.zipf_s")
        if self.concentration < 0:
            raise ConfigError("must be >= 0", "workload.concentration")
        if self.arrival_interval_s < 0:
            raise ConfigError("must be >= 0", "workload.arrival_interval_s")
        for i, g in enumerate(self.requests):
            if g.input_len < 0 or g.output_len < 0 or g.count < 0:
                raise ConfigError("lengths and counts must be >= 0", f"workload.requests[{i}]")
        if self.num_requests < 0:
            raise ConfigError("must be >= 0", "workload.num_requests")
        for name in ("input_len_range", "output_len_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError("need 0 <= lo <= hi", f"workload.{name}")
        if not self.requests and self.num_requests == 0:
            raise ConfigError("workload defines no requests", "workload")

    def request_lengths(self, rng: np.random.Generator) -> list[tuple[int, int]]:
        if self.requests:
            return [(g.input_len, g.output_len) for g in self.requests for _ in range(g.count)]
        ins = rng.integers(self.input_len_range[0], self.input_len_range[1] + 1, self.num_requests)
        outs = rng.integers(self.output_len_range[0], self.output_len_range[1] + 1, self.num_requests)
        return [(int(a), int(b)) for a, b in zip(ins, outs)]


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=float) ** -s
    return w / w.sum()


def make_kernels(spec: MoEModelSpec, concentration: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Row-stochastic layer transition kernels; larger concentration = peakier rows."""
    e = spec.experts_per_layer
    kernels = []
    for _ in range(spec.num_layers - 1):
        logits = concentration * rng.standard_normal((e, e))
        logits -= logits.max(axis=1, keepdims=True)
        k = np.exp(logits)
        kernels.append(k / k.sum(axis=1, keepdims=True))
    return kernels


def _gumbel_topk(log_w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # Plackett-Luce sampling without replacement; column 0 is an exact categorical draw
    g = -np.log(-np.log(rng.random(log_w.shape)))
    keys = log_w + g
    return np.argsort(-keys, axis=1, kind="stable")[:, :k]


@dataclass(eq=False)
class RoutingTrace:
    """Per-token, per-layer expert selections.

    Tokens are laid out request by request: each request's input tokens
    followed by its output tokens. ``selections[t, l]`` lists the ``top_k``
    experts of token ``t`` at layer ``l``, highest gate weight first.
    """

    spec_hash: str
    seed: int
    requests: list[tuple[int, int]]
    selections: np.ndarray
    importance: np.ndarray
    token_embedding_seed: int
    kernels: list[np.ndarray] = field(default_factory=list)
    first_layer_popularity: np.ndarray | None = None

    @property
    def num_tokens(self) -> int:
        return int(self.selections.shape[0])

    def request_offsets(self) -> np.ndarray:
        sizes = np.array([a + b for a, b in self.requests], dtype=np.int64)
        return np.concatenate([[0], np.cumsum(sizes)])

    def request_tokens(self, r: int) -> tuple[range, range]:
        """(input token ids, output token ids) of request ``r``."""
        start = int(self.request_offsets()[r])
        n_in, n_out = self.requests[r]
        return range(start, start + n_in), range(start + n_in, start + n_in + n_out)

    def validate(self, spec: MoEModelSpec) -> None:
        sel = self.selections
        if self.spec_hash != spec.spec_hash():
            raise StructuralError("trace was generated for a different model spec")
        if sel.ndim != 3 or sel.shape[1:] != (spec.num_layers, spec.top_k):
            raise StructuralError(f"selections shape {sel.shape} does not match spec")
        if sel.shape[0] != sum(a + b for a, b in self.requests):
            raise StructuralError("token count disagrees with request lengths")
        if sel.size and (sel.min() < 0 or sel.max() >= spec.experts_per_layer):
            raise StructuralError("expert index out of range")
        if spec.top_k > 1 and sel.size:
            s = np.sort(sel, axis=2)
            if np.any(s[:, :, 1:] == s[:, :, :-1]):
                raise StructuralError("duplicate expert within a token's layer selection")
        if self.importance.shape != (sel.shape[0],):
            raise StructuralError("importance must have one score per token")

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def to_dict(self) -> dict:
        return {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "header": {
                "spec_hash": self.spec_hash,
                "seed": self.seed,
                "token_count": self.num_tokens,
            },
            "requests": [list(r) for r in self.requests],
            "token_embedding_seed": self.token_embedding_seed,
            "selections": _pack(self.selections.astype("<i2")),
            "importance": _pack(self.importance.astype("<f8")),
            "kernels": [_pack(k.astype("<f8")) for k in self.kernels],
            "first_layer_popularity": None
            if self.first_layer_popularity is None
            else _pack(self.first_layer_popularity.astype("<f8")),
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingTrace":
        if d.get("format") != TRACE_FORMAT:
            raise StructuralError("not a routing trace")
        if d.get("version") != TRACE_VERSION:
            raise StructuralError(f"unsupported trace version {d.get('version')}")
        hdr = d["header"]
        sel = _unpack(d["selections"]).astype(np.int16)
        pop = d.get("first_layer_popularity")
        trace = cls(
            spec_hash=hdr["spec_hash"],
            seed=hdr["seed"],
            requests=[tuple(r) for r in d["requests"]],
            selections=sel,
            importance=_unpack(d["importance"]),
            token_embedding_seed=d["token_embedding_seed"],
            kernels=[_unpack(k) for k in d["kernels"]],
            first_layer_popularity=None if pop is None else _unpack(pop),
        )
        if trace.num_tokens != hdr["token_count"]:
            raise StructuralError("header token count does not match payload")
        return trace

    @classmethod
    def from_bytes(cls, data: bytes) -> "RoutingTrace":
        return cls.from_dict(json.loads(data))


def _pack(a: np.ndarray) -> dict:
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode(),
    }


def _unpack(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def generate_trace(spec: MoEModelSpec, workload: WorkloadParams, seed: int) -> RoutingTrace:
    """Draw a synthetic routing trace.

    The top-1 (first listed) expert of layer 0 follows Zipf(s) over a seeded
    rank permutation; each later layer samples ``top_k`` distinct experts from
    the mixture of kernel rows of the previous layer's selection.
    """
    workload.validate()
    rng = np.random.default_rng(seed)
    e, k, n_layers = spec.experts_per_layer, spec.top_k, spec.num_layers
    lengths = workload.request_lengths(rng)
    kernels = make_kernels(spec, workload.concentration, rng)
    popularity = np.empty(e)
    popularity[rng.permutation(e)] = zipf_weights(e, workload.zipf_s)
    emb_seed = int(rng.integers(0, 2**32))

    sizes = np.array([a + b for a, b in lengths], dtype=np.int64)
    n_tokens = int(sizes.sum())
    sel = np.zeros((n_tokens, n_layers, k), dtype=np.int16)
    if n_tokens:
        log_w0 = np.tile(np.log(popularity), (n_tokens, 1))
        shift = workload.shift_after_requests
        if shift is not None and shift < len(lengths):
            start = int(sizes[:shift].sum())
            log_w0[start:] = np.log(np.roll(popularity, max(e // 2, 1)))
        sel[:, 0, :] = _gumbel_topk(log_w0, k, rng)
        with np.errstate(divide="ignore"):
            for layer, kern in enumerate(kernels):
                mix = kern[sel[:, layer, :]].mean(axis=1)
                sel[:, layer + 1, :] = _gumbel_topk(np.log(mix), k, rng)
    importance = rng.random(n_tokens)
    return RoutingTrace(
        spec_hash=spec.spec_hash(),
        seed=seed,
        requests=lengths,
        selections=sel,
        importance=importance,
        token_embedding_seed=emb_seed,
        kernels=kernels,
        first_layer_popularity=popularity,
    )


@dataclass(eq=False)
class CoActivationMatrix:
    """Transition probabilities between experts of adjacent layers.

    ``transitions[l][i, j]`` is the probability that a token routed to expert
    ``i`` at layer ``l`` is routed to ``j`` at layer ``l + 1``. ``marginals[l]``
    is the per-layer expert activation share (sums to 1).
    """

    transitions: list[np.ndarray]
    marginals: list[np.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.marginals)

    def flow(self, layer: int) -> np.ndarray:
        """Joint mass of (i at layer, j at layer + 1)."""
        return self.marginals[layer][:, None] * self.transitions[layer]

    def check(self, spec: MoEModelSpec) -> None:
        e = spec.experts_per_layer
        if len(self.marginals) != spec.num_layers or len(self.transitions) != spec.num_layers - 1:
            raise StructuralError("co-activation layer count does not match spec")
        for p in self.transitions:
            if p.shape != (e, e):
                raise StructuralError("co-activation matrix has wrong dimensions")

    @classmethod
    def from_kernels(cls, kernels: list[np.ndarray], first_marginal: np.ndarray) -> "CoActivationMatrix":
        """Propagate a first-layer marginal through given kernels."""
        margs = [np.asarray(first_marginal, dtype=float)]
        for k in kernels:
            margs.append(margs[-1] @ k)
        return cls([np.asarray(k, dtype=float) for k in kernels], margs)


def estimate_coactivation(trace: RoutingTrace, spec: MoEModelSpec) -> CoActivationMatrix:
    """Maximum-likelihood transition counting; top-k pairs are weighted 1/k."""
    trace.validate(spec)
    if trace.num_tokens == 0:
        raise StructuralError("cannot estimate co-activation from an empty trace")
    e, k = spec.experts_per_layer, spec.top_k
    sel = trace.selections.astype(np.int64)
    n = trace.num_tokens
    marginals = []
    for layer in range(spec.num_layers):
        counts = np.bincount(sel[:, layer, :].ravel(), minlength=e).astype(float)
        marginals.append(counts / (n * k))
    transitions = []
    for layer in range(spec.num_layers - 1):
        src = np.repeat(sel[:, layer, :], k, axis=1).ravel()
        dst = np.tile(sel[:, layer + 1, :], (1, k)).ravel()
        w = np.bincount(src * e + dst, minlength=e * e).reshape(e, e) / k
        rows = w.sum(axis=1, keepdims=True)
        p = np.divide(w, rows, out=np.zeros_like(w), where=rows > 0)
        transitions.append(p)
    return CoActivationMatrix(transitions, marginals)


DEFAULT_ACTIVATION_NOISE = 0.5


def cluster_center(seed: int, layer: int, cluster: int, hidden_dim: int) -> np.ndarray:
    v = np.random.default_rng([seed, layer, cluster, 0xC1]).standard_normal(hidden_dim)
    return v / np.linalg.norm(v)


def activation_vectors(
    seed: int,
    layer: int,
    token_ids,
    cluster_ids,
    hidden_dim: int,
    noise: float = DEFAULT_ACTIVATION_NOISE,
) -> np.ndarray:
    out = np.empty((len(token_ids), hidden_dim))
    centers: dict[int, np.ndarray] = {}
    for row, (tok, c) in enumerate(zip(token_ids, cluster_ids)):
        c = int(c)
        if c not in centers:
            centers[c] = cluster_center(seed, layer, c, hidden_dim)
        vec = centers[c].copy()
        if noise:
            eps = np.random.default_rng([seed, layer, int(tok), 0x70]).standard_normal(hidden_dim)
            vec += noise * eps / np.sqrt(hidden_dim)
        out[row] = vec
    return out


def synthesize_activations(
    trace: RoutingTrace,
    spec: MoEModelSpec,
    layer: int,
    tokens=None,
    noise: float = DEFAULT_ACTIVATION_NOISE,
) -> np.ndarray:
    """Hidden states leaving ``layer``, clustered by each token's top-1 expert there."""
    if tokens is None:
        tokens = range(trace.num_tokens)
    tokens = list(tokens)
    clusters = trace.selections[tokens, layer, 0] if tokens else []
    return activation_vectors(trace.token_embedding_seed, layer, tokens, clusters, spec.hidden_dim, noise)
