"""GPU/SSD expert paging: popularity tracking, look-ahead prediction and prefetch."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PlacementViolation
from .model import CoActivationMatrix, ExpertRef, MoEModelSpec, RoutingTrace


@dataclass
class PagingConfig:
    enabled: bool = True
    prefetch_depth: int = 2
    decay: float = 0.98
    blend: float = 0.5
    # None: whatever GPU memory is left after the shared weights
    gpu_budget_bytes: float | None = None

    def __post_init__(self):
        if self.prefetch_depth < 0:
            raise ConfigError("must be >= 0", "paging.prefetch_depth")
        if not 0 < self.decay <= 1:
            raise ConfigError("must be in (0, 1]", "paging.decay")
        if not 0 <= self.blend <= 1:
            raise ConfigError("must be in [0, 1]", "paging.blend")
        if self.gpu_budget_bytes is not None and self.gpu_budget_bytes <= 0:
            raise ConfigError("must be > 0", "paging.gpu_budget_bytes")


class PopularityModel:
    """Per-layer EWMA of expert activation shares."""

    def __init__(self, freq: np.ndarray, decay: float = 0.98):
        if not 0 < decay <= 1:
            raise ConfigError("must be in (0, 1]", "paging.decay")
        freq = np.array(freq, dtype=float)
        if freq.ndim != 2 or np.any(freq < 0):
            raise ConfigError("popularity must be a non-negative (layers, experts) array", "paging.popularity")
        sums = freq.sum(axis=1, keepdims=True)
        uniform = np.full_like(freq, 1.0 / freq.shape[1])
        self.freq = np.where(sums > 0, freq / np.where(sums > 0, sums, 1), uniform)
        self.decay = decay

    @classmethod
    def uniform(cls, spec: MoEModelSpec, decay: float = 0.98) -> "PopularityModel":
        return cls(np.ones((spec.num_layers, spec.experts_per_layer)), decay)

    @classmethod
    def from_coactivation(cls, coact: CoActivationMatrix, decay: float = 0.98) -> "PopularityModel":
        return cls(np.vstack(coact.marginals), decay)

    def copy(self) -> "PopularityModel":
        return PopularityModel(self.freq.copy(), self.decay)

    def score(self, expert: ExpertRef) -> float:
        return float(self.freq[expert.layer, expert.expert])

    def observe(self, selections) -> None:
        """In-place update from one token's (layers, top_k) selection array."""
        sel = np.asarray(selections)
        if self.decay == 1:
            return
        k = sel.shape[1]
        ind = np.zeros_like(self.freq)
        rows = np.repeat(np.arange(sel.shape[0]), k)
        np.add.at(ind, (rows, sel.ravel()), 1.0 / k)
        self.freq = self.decay * self.freq + (1 - self.decay) * ind
        self.freq /= self.freq.sum(axis=1, keepdims=True)

    def observe_layer(self, layer: int, experts) -> None:
        if self.decay == 1:
            return
        experts = list(experts)
        row = self.decay * self.freq[layer]
        for e in experts:
            row[e] += (1 - self.decay) / len(experts)
        self.freq[layer] = row / row.sum()


def update_popularity(model: PopularityModel, observed) -> PopularityModel:
    out = model.copy()
    out.observe(observed)
    return out


def _rank(score: np.ndarray, pop: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(score)), -pop, -score))


def predict_ahead(model: PopularityModel, current, coact: CoActivationMatrix, layer: int, depth: int,
                  blend: float = 0.5) -> list[np.ndarray]:
    """Ranked expert indices for layers ``layer+1 .. layer+depth``.

    The next layer is ranked by summed transition probability from the current
    selection; deeper layers blend the propagated selection distribution with
    the EWMA popularity. Ties fall back to popularity, then index.
    """
    n_layers = model.freq.shape[0]
    if not 1 <= depth <= n_layers - layer - 1:
        raise ValueError(f"depth {depth} out of range for layer {layer}")
    current = list(current)
    e = model.freq.shape[1]
    out = []
    score = coact.transitions[layer][current].sum(axis=0)
    out.append(_rank(score, model.freq[layer + 1]))
    v = np.zeros(e)
    v[current] = 1.0 / len(current)
    v = v @ coact.transitions[layer]
    for step in range(2, depth + 1):
        target = layer + step
        v = v @ coact.transitions[target - 1]
        pop = model.freq[target]
        out.append(_rank(blend * v + (1 - blend) * pop, pop))
    return out


@dataclass
class LoadCommand:
    expert: ExpertRef
    start: float
    completion: float
    nbytes: float


@dataclass
class ExpertCacheState:
    """GPU residency of one server's experts.

    The budget covers expert bytes only; shared weights are pinned outside it.
    Loads share one serialized bus; an expert being loaded counts against the
    budget from issue time.
    """

    server: int
    gpu_budget_bytes: float
    sizes: dict[ExpertRef, float]
    bandwidth: float
    popularity: PopularityModel | None = None
    resident: dict[ExpertRef, float] = field(default_factory=dict)
    in_flight: dict[ExpertRef, float] = field(default_factory=dict)
    pinned: set[ExpertRef] = field(default_factory=set)
    bus_free_at: float = 0.0
    hits: int = 0
    misses: int = 0
    prefetch_hits: int = 0
    bytes_loaded: float = 0.0
    stalls: list[float] = field(default_factory=list)
    peak_bytes: float = 0.0
    # assert the budget after every residency change
    strict: bool = False
    _prefetched: set = field(default_factory=set, repr=False)
    _used: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigError("must be > 0", "paging.bandwidth")
        big = max(self.sizes.values(), default=0.0)
        if big > self.gpu_budget_bytes:
            raise ConfigError(f"an expert of {big:.0f} bytes exceeds the GPU budget {self.gpu_budget_bytes:.0f}",
                              "paging.gpu_budget_bytes")

        self._used = sum(self.sizes[e] for e in self.resident) + sum(self.sizes[e] for e in self.in_flight)

    @property
    def used_bytes(self) -> float:
        return self._used

    def _check(self) -> None:
        if self.strict:
            assert self._used <= self.gpu_budget_bytes + 1e-6, \
                f"budget exceeded on server {self.server}: {self._used} > {self.gpu_budget_bytes}"

    def _pop(self, e: ExpertRef) -> float:
        return self.popularity.score(e) if self.popularity is not None else 0.0

    def settle(self, now: float) -> None:
        done = [e for e, t in self.in_flight.items() if t <= now]
        for e in sorted(done, key=lambda x: (self.in_flight[x], x)):
            self.resident[e] = self.in_flight.pop(e)

    def warm(self, experts) -> None:
        """Fill residency up front in the given order while the budget admits."""
        for e in experts:
            if e in self.resident or e not in self.sizes:
                continue
            if self.used_bytes + self.sizes[e] > self.gpu_budget_bytes:
                break
            self.resident[e] = 0.0
            self._used += self.sizes[e]
            self._check()
        self.peak_bytes = max(self.peak_bytes, self.used_bytes)

    def _make_room(self, nbytes: float, protect=(), floor: float | None = None) -> list[ExpertRef] | None:
        """Evict until ``nbytes`` fit; returns victims, or None (and evicts nothing) if impossible.

        ``floor``: only evict experts strictly less popular than this.
        """
        free = self.gpu_budget_bytes - self.used_bytes
        if nbytes <= free + 1e-9:
            return []
        protect = set(protect) | self.pinned
        table = self.popularity.freq.tolist() if self.popularity is not None else None
        keyed = []
        room = free
        for e, last in self.resident.items():
            if e in protect:
                continue
            p = table[e[0]][e[1]] if table is not None else 0.0
            if floor is None or p < floor:
                keyed.append((p, last, e))
                room += self.sizes[e]
        if nbytes > room + 1e-9:
            return None
        heapq.heapify(keyed)
        victims = []
        while nbytes > free + 1e-9:
            e = heapq.heappop(keyed)[2]
            victims.append(e)
            free += self.sizes[e]
        for e in victims:
            del self.resident[e]
            self._used -= self.sizes[e]
            self._prefetched.discard(e)
        return victims

    def _issue(self, e: ExpertRef, now: float) -> LoadCommand:
        start = max(now, self.bus_free_at)
        done = start + self.sizes[e] / self.bandwidth
        self.bus_free_at = done
        self.in_flight[e] = done
        self._used += self.sizes[e]
        self.bytes_loaded += self.sizes[e]
        self.peak_bytes = max(self.peak_bytes, self.used_bytes)
        self._check()
        return LoadCommand(e, start, done, self.sizes[e])


def schedule_prefetch(cache: ExpertCacheState, predictions, now: float,
                      intra_bus_bandwidth: float | None = None) -> tuple[list[LoadCommand], list[ExpertRef]]:
    """Load top-ranked predicted experts while the budget admits them.

    ``predictions`` is an ordered iterable of ExpertRef, best first. A load may
    evict resident experts that are less popular than the one being fetched
    and are neither pinned nor among the predictions themselves.
    """
    if intra_bus_bandwidth is not None:
        if intra_bus_bandwidth <= 0:
            raise ConfigError("must be > 0", "paging.bandwidth")
        cache.bandwidth = intra_bus_bandwidth
    cache.settle(now)
    preds = [e for e in predictions if e in cache.sizes]
    wanted = set(preds)
    loads, evicted = [], []
    for e in preds:
        if e in cache.resident or e in cache.in_flight:
            continue
        victims = cache._make_room(cache.sizes[e], protect=wanted, floor=cache._pop(e))
        if victims is None:
            break
        evicted.extend(victims)
        loads.append(cache._issue(e, now))
        cache._prefetched.add(e)
    return loads, evicted


def access_expert(cache: ExpertCacheState, expert: ExpertRef, now: float) -> tuple[float, ExpertCacheState]:
    """Stall seconds before ``expert`` can run at ``now``; updates residency and counters."""
    if expert not in cache.sizes:
        raise PlacementViolation(f"{expert} is not placed on server {cache.server}")
    cache.settle(now)
    if expert in cache.resident:
        cache.hits += 1
        if expert in cache._prefetched:
            cache.prefetch_hits += 1
            cache._prefetched.discard(expert)
        cache.resident[expert] = now
        cache.stalls.append(0.0)
        return 0.0, cache
    cache.misses += 1
    if expert in cache.in_flight:
        if expert in cache._prefetched:
            cache.prefetch_hits += 1
            cache._prefetched.discard(expert)
        stall = cache.in_flight[expert] - now
        cache.stalls.append(stall)
        return stall, cache
    victims = cache._make_room(cache.sizes[expert])
    start = max(now, cache.bus_free_at)
    if victims is None:
        # nothing evictable: stream the weights through without keeping them
        done = start + cache.sizes[expert] / cache.bandwidth
        cache.bus_free_at = done
        cache.bytes_loaded += cache.sizes[expert]
    else:
        done = cache._issue(expert, now).completion
    stall = done - now
    cache.stalls.append(stall)
    return stall, cache


def paging_stats(cache: ExpertCacheState) -> dict:
    stalls = np.array(cache.stalls) if cache.stalls else np.zeros(1)
    total = cache.hits + cache.misses
    return {
        "hits": cache.hits,
        "misses": cache.misses,
        "prefetch_hits": cache.prefetch_hits,
        "hit_rate": cache.hits / total if total else 1.0,
        "mean_stall_s": float(stalls.mean()),
        "p95_stall_s": float(np.percentile(stalls, 95)),
        "total_stall_s": float(stalls.sum()),
        "bytes_loaded": cache.bytes_loaded,
    }


@dataclass
class ReplayResult:
    stats: dict
    events: int
    tokens: int
    max_used_bytes: float


def replay_paging(trace: RoutingTrace, spec: MoEModelSpec, coact: CoActivationMatrix, *,
                  gpu_budget_bytes: float, bandwidth: float, layer_compute_s: float,
                  depth: int = 2, decay: float = 0.98, blend: float = 0.5, expert_bytes: float | None = None,
                  max_tokens: int | None = None, check_budget: bool = True) -> ReplayResult:
    """Single-server paging replay of a trace, one token at a time through all layers.

    Every expert lives on the one server; each layer costs ``layer_compute_s``
    after its experts are available. With ``check_budget`` the residency
    budget is asserted after every cache event.
    """
    size = spec.expert_param_bytes if expert_bytes is None else expert_bytes
    sizes = {e: float(size) for e in spec.experts()}
    pop = PopularityModel.from_coactivation(coact, decay)
    cache = ExpertCacheState(0, gpu_budget_bytes, sizes, bandwidth, pop, strict=check_budget)
    cache.warm(sorted(spec.experts(), key=lambda e: (-pop.score(e), e)))
    sel = trace.selections
    n = trace.num_tokens if max_tokens is None else min(max_tokens, trace.num_tokens)
    now = 0.0
    events = 0
    peak = cache.used_bytes

    def check():
        nonlocal peak
        used = cache.used_bytes
        peak = max(peak, used)
        if check_budget:
            assert used <= gpu_budget_bytes + 1e-6, f"budget exceeded: {used} > {gpu_budget_bytes}"

    for t in range(n):
        for layer in range(spec.num_layers):
            experts = [ExpertRef(layer, int(x)) for x in sel[t, layer]]
            cache.pinned = set(experts)
            stall = 0.0
            for e in experts:
                s, _ = access_expert(cache, e, now)
                stall = max(stall, s)
                events += 1
                check()
            d = min(depth, spec.num_layers - layer - 1)
            if d > 0:
                ranks = predict_ahead(pop, [e.expert for e in experts], coact, layer, d, blend)
                preds = [ExpertRef(layer + 1 + i, int(x)) for i, r in enumerate(ranks) for x in r[:spec.top_k]]
                loads, evicted = schedule_prefetch(cache, preds, now)
                events += len(loads) + len(evicted)
                check()
            now += stall + layer_compute_s
            events += 1
            pop.observe_layer(layer, [e.expert for e in experts])
        cache.pinned = set()
    return ReplayResult(paging_stats(cache), events, n, peak)
