"""Inter-device deployment: sub-model segmentation, placement and replica routing."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .compression import QuantPolicy, uniform_bits
from .costs import CostModel
from .edgenet import EdgeTopology, ResourceStatus
from .errors import ConfigError, CoverageError, InfeasibleError, SizeGuardError
from .model import CoActivationMatrix, ExpertRef, MoEModelSpec

BRUTE_FORCE_LIMIT = 10**7
_EPS = 1e-15
SMALL_MODEL_EXPERTS = 64
LARGE_MODEL_STARTS = 4


@dataclass(frozen=True)
class SubModel:
    """Full-depth slice of the model: one non-empty expert set per layer.

    ``replicas`` lists (rank, expert) for members added by replication; rank
    is the global order in which the replication budget was spent.
    """

    layers: tuple[frozenset[int], ...]
    replicas: tuple[tuple[int, ExpertRef], ...] = ()

    def experts(self) -> set[ExpertRef]:
        return {ExpertRef(layer, e) for layer, es in enumerate(self.layers) for e in es}

    def core(self) -> set[ExpertRef]:
        return self.experts() - {e for _, e in self.replicas}

    @property
    def size(self) -> int:
        return sum(len(s) for s in self.layers)


@dataclass
class Placement:
    assignment: dict[int, frozenset[ExpertRef]]
    shared_hosts: frozenset[int] = frozenset()
    _hosts: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.assignment = {s: frozenset(ExpertRef(*e) for e in es) for s, es in self.assignment.items()}
        self.shared_hosts = frozenset(self.shared_hosts)
        idx: dict[ExpertRef, list[int]] = {}
        for s in sorted(self.assignment):
            for e in self.assignment[s]:
                idx.setdefault(e, []).append(s)
        self._hosts = idx

    @classmethod
    def build(cls, assignment: dict[int, set]) -> "Placement":
        """Shared weights on every server that hosts at least one expert."""
        assignment = {s: frozenset(es) for s, es in assignment.items() if es}
        return cls(assignment, frozenset(assignment))

    def hosts(self, expert: ExpertRef) -> list[int]:
        return self._hosts.get(expert, [])

    @property
    def servers(self) -> list[int]:
        return sorted(set(self.assignment) | self.shared_hosts)

    def copies(self) -> int:
        return sum(len(v) for v in self.assignment.values())

    def resident_bytes(self, server: int, spec: MoEModelSpec, quant: QuantPolicy) -> float:
        total = quant.server_expert_bytes(spec, server, self.assignment.get(server, ()))
        if server in self.shared_hosts:
            total += quant.shared_bytes(spec)
        return total

    def to_json(self) -> dict:
        out: dict = {str(s): sorted([e.layer, e.expert] for e in es) for s, es in sorted(self.assignment.items())}
        out["shared_hosts"] = sorted(self.shared_hosts)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Placement":
        assignment = {int(k): frozenset(ExpertRef(*e) for e in v) for k, v in d.items() if k != "shared_hosts"}
        return cls(assignment, frozenset(d.get("shared_hosts", assignment)))

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        mine = {s: es for s, es in self.assignment.items() if es}
        theirs = {s: es for s, es in other.assignment.items() if es}
        return mine == theirs and self.shared_hosts == other.shared_hosts


def check_placement(placement: Placement, spec: MoEModelSpec, capacities: dict[int, float],
                    quant: QuantPolicy) -> list[str]:
    """Structural checker; returns human-readable violations (empty when valid)."""
    problems = []
    missing = [e for e in spec.experts() if not placement.hosts(e)]
    if missing:
        problems.append(f"coverage: {len(missing)} experts hosted nowhere, e.g. {missing[0]}")
    for s, es in placement.assignment.items():
        for e in es:
            if not (0 <= e.layer < spec.num_layers and 0 <= e.expert < spec.experts_per_layer):
                problems.append(f"server {s}: {e} outside model bounds")
        if es and s not in placement.shared_hosts:
            problems.append(f"server {s} executes experts but lacks the shared weights")
    for s in placement.servers:
        if s not in capacities:
            problems.append(f"server {s} is not a deployable node")
            continue
        used = placement.resident_bytes(s, spec, quant)
        if used > capacities[s] * (1 + 1e-12):
            problems.append(f"capacity: server {s} holds {used:.0f} > {capacities[s]:.0f} bytes")
    return problems


@dataclass(frozen=True)
class PlacementObjective:
    expected_latency_s: float
    expected_cross_transitions: float
    alpha_latency: float
    beta_frequency: float

    @property
    def value(self) -> float:
        return self.alpha_latency * self.expected_latency_s + self.beta_frequency * self.expected_cross_transitions

    def as_dict(self) -> dict:
        return {
            "expected_latency_s": self.expected_latency_s,
            "expected_cross_transitions": self.expected_cross_transitions,
            "alpha_latency": self.alpha_latency,
            "beta_frequency": self.beta_frequency,
            "objective": self.value,
        }


# --- segmentation -----------------------------------------------------------


def _pick(scores: np.ndarray, mask: np.ndarray, *tie_keys: np.ndarray) -> int:
    """Index of the max score among ``mask``; ties broken by ``tie_keys`` (ascending) then index."""
    cand = np.flatnonzero(mask)
    keys = [cand] + [k[cand] for k in reversed(tie_keys)] + [-scores[cand]]
    return int(cand[np.lexsort(keys)[0]])


def internal_mass(submodels: list[SubModel], coact: CoActivationMatrix) -> float:
    total = 0.0
    for sm in submodels:
        for layer in range(len(sm.layers) - 1):
            a, b = sorted(sm.layers[layer]), sorted(sm.layers[layer + 1])
            total += float(coact.flow(layer)[np.ix_(a, b)].sum())
    return total


def segment_submodels(coact: CoActivationMatrix, spec: MoEModelSpec, num_submodels: int,
                      replication_budget: int = 0, max_swaps: int = 100_000) -> list[SubModel]:
    """Seed-and-grow greedy segmentation followed by pairwise-exchange improvement.

    Each sub-model is seeded with a high-probability chain through all layers,
    then grown one expert at a time by largest added transition mass under a
    per-layer cap of ceil(E/K) + 1. Exchanges of same-layer experts between
    two sub-models are applied while they raise total internal mass. Finally
    up to ``replication_budget`` replica slots go to the non-members with the
    most boundary mass into a sub-model.
    """
    coact.check(spec)
    k, n_layers, n_exp = num_submodels, spec.num_layers, spec.experts_per_layer
    if k < 1:
        raise ConfigError("must be >= 1", "placement.num_submodels")
    if replication_budget < 0:
        raise ConfigError("must be >= 0", "placement.replication_budget")
    if k > n_exp:
        raise InfeasibleError(f"{k} sub-models need at least {k} experts per layer, model has {n_exp}")
    flows = [coact.flow(layer) for layer in range(n_layers - 1)]
    pis = [np.asarray(m, dtype=float) for m in coact.marginals]
    member = np.zeros((k, n_layers, n_exp), dtype=bool)
    owner = -np.ones((n_layers, n_exp), dtype=int)
    gain = np.zeros((k, n_layers, n_exp))

    def add(s, layer, e):
        member[s, layer, e] = True
        if layer > 0:
            gain[s, layer - 1] += flows[layer - 1][:, e]
        if layer < n_layers - 1:
            gain[s, layer + 1] += flows[layer][e, :]

    def remove(s, layer, e):
        member[s, layer, e] = False
        if layer > 0:
            gain[s, layer - 1] -= flows[layer - 1][:, e]
        if layer < n_layers - 1:
            gain[s, layer + 1] -= flows[layer][e, :]

    idx = np.arange(n_exp)
    for s in range(k):
        free = owner[0] < 0
        e = _pick(pis[0], free, idx)
        chain = [e]
        for layer in range(1, n_layers):
            free = owner[layer] < 0
            e = _pick(coact.transitions[layer - 1][chain[-1]], free, -pis[layer], idx)
            chain.append(e)
        for layer, e in enumerate(chain):
            owner[layer, e] = s
            add(s, layer, e)

    cap = math.ceil(n_exp / k) + 1
    counts = member.sum(axis=2)
    remaining = int((owner < 0).sum())
    s_idx, l_idx, e_idx = np.indices((k, n_layers, n_exp))
    while remaining:
        mask = (owner[None] < 0) & (counts[:, :, None] < cap)
        flat = _pick(gain.ravel(), mask.ravel(), np.broadcast_to(counts[:, :, None], mask.shape).ravel(),
                     s_idx.ravel(), l_idx.ravel(), e_idx.ravel())
        s, layer, e = np.unravel_index(flat, mask.shape)
        owner[layer, e] = s
        add(s, layer, e)
        counts[s, layer] += 1
        remaining -= 1

    swaps = 0
    improved = True
    while improved and swaps < max_swaps:
        improved = False
        for layer in range(n_layers):
            for s in range(k):
                for t in range(s + 1, k):
                    a_set = np.flatnonzero(member[s, layer])
                    b_set = np.flatnonzero(member[t, layer])
                    if len(a_set) == 0 or len(b_set) == 0:
                        continue
                    gs, gt = gain[s, layer], gain[t, layer]
                    delta = (gs[b_set][None, :] - gs[a_set][:, None]) + (gt[a_set][:, None] - gt[b_set][None, :])
                    pos = np.unravel_index(np.argmax(delta), delta.shape)
                    if delta[pos] > 1e-12:
                        a, b = int(a_set[pos[0]]), int(b_set[pos[1]])
                        remove(s, layer, a)
                        remove(t, layer, b)
                        add(s, layer, b)
                        add(t, layer, a)
                        owner[layer, a], owner[layer, b] = t, s
                        swaps += 1
                        improved = True

    replicas: list[tuple[int, int, ExpertRef]] = []
    for rank in range(replication_budget):
        mask = ~member
        if not mask.any():
            break
        flat = _pick(gain.ravel(), mask.ravel(), s_idx.ravel(), l_idx.ravel(), e_idx.ravel())
        if gain.ravel()[flat] <= 0:
            break
        s, layer, e = (int(v) for v in np.unravel_index(flat, mask.shape))
        add(s, layer, e)
        replicas.append((rank, s, ExpertRef(layer, e)))

    out = []
    for s in range(k):
        layers = tuple(frozenset(int(e) for e in np.flatnonzero(member[s, layer])) for layer in range(n_layers))
        reps = tuple((rank, e) for rank, owner_s, e in replicas if owner_s == s)
        out.append(SubModel(layers, reps))
    return out


# --- objective --------------------------------------------------------------


def server_capacity(server, view: dict[int, ResourceStatus] | None = None, mode: str = "gpu",
                    gpu_utilization: float = 1.0) -> float:
    """Bytes a server offers to placement, scaled by its perceived free GPU memory."""
    pct = 100
    if view and server.id in view:
        pct = view[server.id].avail_gpu_mem_pct
    cap = server.gpu_mem_bytes * gpu_utilization * pct / 100
    if mode == "gpu+ssd":
        cap += server.ssd_bytes
    elif mode != "gpu":
        raise ConfigError(f"unknown capacity mode {mode!r}", "placement.capacity_mode")
    return cap


class _ObjectiveModel:
    """Pairwise-additive expected cost of a placement, with cheap per-expert deltas.

    Replicated experts are priced optimistically: a transition is local when
    the two experts share any host, and transfer time is the cheapest host
    pair. For single-copy placements this is exact.
    """

    def __init__(self, spec, topology, coact, quant, cost, servers):
        self.spec, self.topology, self.quant, self.cost = spec, topology, quant, cost
        self.servers = list(servers)
        self.sidx = {s: i for i, s in enumerate(self.servers)}
        n = len(self.servers)
        act = spec.token_activation_bytes
        tt = np.zeros((n, n))
        for i, a in enumerate(self.servers):
            for j, b in enumerate(self.servers):
                if a != b:
                    tt[i, j] = topology.path_transfer_time(act, a, b)
        self.tt = tt
        self.flows = [coact.flow(layer) for layer in range(spec.num_layers - 1)]
        self.pis = [np.asarray(m, dtype=float) for m in coact.marginals]
        self.alpha = cost.alpha_latency
        self.beta = cost.beta(spec, topology)
        self._ct_cache: dict = {}

    def expert_time(self, s: int, bits: int) -> float:
        key = ("e", s, bits)
        if key not in self._ct_cache:
            self._ct_cache[key] = self.cost.expert_time(self.spec, self.topology.server(s), 1, bits)
        return self._ct_cache[key]

    def shared_time(self, s: int) -> float:
        key = ("s", s)
        if key not in self._ct_cache:
            self._ct_cache[key] = self.cost.shared_time(self.spec, self.topology.server(s), 1,
                                                        self.quant.shared_bits)
        return self._ct_cache[key]

    def masks(self, placement: Placement) -> list[np.ndarray]:
        m = [np.zeros((self.spec.experts_per_layer, len(self.servers)), dtype=bool)
             for _ in range(self.spec.num_layers)]
        for s, es in placement.assignment.items():
            j = self.sidx[s]
            for e in es:
                m[e.layer][e.expert, j] = True
        return m

    def _pair(self, m_a: np.ndarray, m_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(cross indicator, cheapest transfer) for every row of m_a vs every row of m_b."""
        inf = np.inf
        a = np.where(m_a, 0.0, inf)
        b = np.where(m_b, 0.0, inf)
        x = (a[:, :, None] + self.tt[None, :, :]).min(axis=1)
        t = (x[:, None, :] + b[None, :, :]).min(axis=2)
        cross = (m_a.astype(np.int64) @ m_b.T.astype(np.int64)) == 0
        t = np.where(np.isfinite(t), t, 0.0)
        return cross.astype(float), t

    def compute_terms(self, layer: int, expert: int, host_mask: np.ndarray, placement_bits) -> float:
        hosts = np.flatnonzero(host_mask)
        if len(hosts) == 0:
            return 0.0
        ref = ExpertRef(layer, expert)
        best = min(self.spec.top_k * self.expert_time(self.servers[h], placement_bits(self.servers[h], ref))
                   + self.shared_time(self.servers[h]) for h in hosts)
        return float(self.pis[layer][expert]) * best

    def evaluate(self, placement: Placement) -> PlacementObjective:
        masks = self.masks(placement)
        lat = 0.0
        crossings = 0.0
        bits = self._bits_fn()
        for layer in range(self.spec.num_layers):
            for e in range(self.spec.experts_per_layer):
                lat += self.compute_terms(layer, e, masks[layer][e], bits)
        for layer, f in enumerate(self.flows):
            cross, t = self._pair(masks[layer], masks[layer + 1])
            crossings += float((f * cross).sum())
            lat += float((f * t).sum())
        return PlacementObjective(lat, crossings, self.alpha, self.beta)

    def _bits_fn(self):
        q = self.quant
        return lambda s, e: q.bits_of(s, e, 16)

    def expert_cost(self, masks, layer: int, expert: int, host_mask: np.ndarray) -> float:
        """Objective terms that involve ``expert`` when it sits on ``host_mask``."""
        total = self.alpha * self.compute_terms(layer, expert, host_mask, self._bits_fn())
        hosts = np.flatnonzero(host_mask)
        if len(hosts) == 0:
            return total
        if layer > 0:
            m = masks[layer - 1]
            near = self.tt[:, hosts].min(axis=1)
            t = np.where(m, near[None, :], np.inf).min(axis=1)
            t[np.isinf(t)] = 0.0
            cross = ~m[:, hosts].any(axis=1)
            f = self.flows[layer - 1][:, expert]
            total += float(f @ (self.alpha * t + self.beta * cross))
        if layer < self.spec.num_layers - 1:
            m = masks[layer + 1]
            near = self.tt[hosts, :].min(axis=0)
            t = np.where(m, near[None, :], np.inf).min(axis=1)
            t[np.isinf(t)] = 0.0
            cross = ~m[:, hosts].any(axis=1)
            f = self.flows[layer][expert, :]
            total += float(f @ (self.alpha * t + self.beta * cross))
        return total


def expected_objective(placement: Placement, coact: CoActivationMatrix, spec: MoEModelSpec,
                       topology: EdgeTopology, quant: QuantPolicy, cost: CostModel) -> PlacementObjective:
    missing = next((e for e in spec.experts() if not placement.hosts(e)), None)
    if missing is not None:
        raise CoverageError(f"{missing} is hosted nowhere")
    servers = sorted(set(placement.servers) | set(topology.server_ids))
    return _ObjectiveModel(spec, topology, coact, quant, cost, servers).evaluate(placement)


# --- placement --------------------------------------------------------------


class _Ledger:
    """Mutable per-server byte accounting during search."""

    def __init__(self, spec, quant, capacities, assignment):
        self.spec, self.quant, self.cap = spec, quant, capacities
        self.assign = {s: set(es) for s, es in assignment.items()}
        for s in capacities:
            self.assign.setdefault(s, set())
        self.shared = quant.shared_bytes(spec)
        self.used = {s: self._bytes(s) for s in self.assign}

    def _bytes(self, s):
        es = self.assign[s]
        return sum(self.size(s, e) for e in es) + (self.shared if es else 0.0)

    def size(self, s, e):
        return self.quant.expert_bytes(self.spec, s, e) if isinstance(self.quant, QuantPolicy) else 0.0

    def delta_bytes_add(self, s, e):
        return self.size(s, e) + (0.0 if self.assign[s] else self.shared)

    def fits_add(self, s, e, freed: float = 0.0):
        return self.used[s] - freed + self.delta_bytes_add(s, e) <= self.cap[s] * (1 + 1e-12)

    def add(self, s, e):
        self.used[s] += self.delta_bytes_add(s, e)
        self.assign[s].add(e)

    def remove(self, s, e):
        self.assign[s].discard(e)
        self.used[s] -= self.size(s, e) + (0.0 if self.assign[s] else self.shared)

    def placement(self) -> Placement:
        return Placement.build(self.assign)


def _availability(view, s) -> float:
    if view and s in view:
        return max(view[s].avail_compute_pct, 1) / 100
    return 1.0


def place(submodels: list[SubModel], topology: EdgeTopology, view: dict[int, ResourceStatus] | None,
          spec: MoEModelSpec, quant: QuantPolicy, cost: CostModel, coact: CoActivationMatrix, *,
          capacities: dict[int, float] | None = None, servers: list[int] | None = None,
          max_iters: int = 1000, max_starts: int = 32) -> Placement:
    """Greedy sub-model assignment, single-expert move/swap local search, then replicas.

    Local search runs from the greedy start and from every whole-sub-model
    mapping that fits (up to ``max_starts``); the best result is kept.
    Replicas are added last, each only if it does not raise the objective, so a
    larger replication budget can never make the returned plan worse.
    """
    servers = sorted(servers if servers is not None else topology.server_ids)
    if not servers:
        raise ConfigError("no servers to place on", "deployment.servers")
    if capacities is None:
        capacities = {s: server_capacity(topology.server(s), view) for s in servers}
    capacities = {s: capacities[s] for s in servers}
    shared = quant.shared_bytes(spec)
    expert_bytes = sum(quant.expert_bytes(spec, servers[0], e) for e in spec.experts())
    avail = sum(max(0.0, c - shared) for c in capacities.values())
    if expert_bytes > avail:
        raise InfeasibleError("aggregate capacity below quantized model size", expert_bytes - avail)

    model = _ObjectiveModel(spec, topology, coact, quant, cost, servers)
    cores = [(i, sm.core()) for i, sm in enumerate(submodels)]
    starts = [_greedy_start(cores, spec, quant, capacities, servers, view)]
    starts += _mapped_starts(cores, spec, quant, capacities, servers, max_starts)
    unique, seen = [], set()
    for ledger, home in starts:
        key = frozenset((s, frozenset(es)) for s, es in ledger.assign.items() if es)
        if key not in seen:
            seen.add(key)
            unique.append((ledger, home))
    if spec.num_experts > SMALL_MODEL_EXPERTS and len(unique) > LARGE_MODEL_STARTS:
        # greedy start plus the best-scoring mappings; search cost dominates at this size
        ranked = sorted(range(1, len(unique)), key=lambda i: (model.evaluate(unique[i][0].placement()).value, i))
        unique = [unique[0]] + [unique[i] for i in ranked[:LARGE_MODEL_STARTS - 1]]
    best = None
    for ledger, home in unique:
        _local_search(model, ledger, servers, max_iters)
        value = model.evaluate(ledger.placement()).value
        if best is None or value < best[0] - 1e-15 * max(1.0, abs(value)):
            best = (value, ledger, home)
    _, ledger, home = best

    reps = sorted((rank, i, e) for i, sm in enumerate(submodels) for rank, e in sm.replicas)
    if reps:
        masks = model.masks(ledger.placement())
        for _, i, e in reps:
            target = home.get(i)
            if target is None or e in ledger.assign[target] or not ledger.fits_add(target, e):
                continue
            old = masks[e.layer][e.expert].copy()
            new = old.copy()
            new[model.sidx[target]] = True
            if model.expert_cost(masks, e.layer, e.expert, new) <= model.expert_cost(masks, e.layer, e.expert, old):
                ledger.add(target, e)
                masks[e.layer][e.expert] = new
    return ledger.placement()


def _greedy_start(cores, spec, quant, capacities, servers, view):
    """Largest sub-model first onto the roomiest server; split across servers when nothing fits."""
    ledger = _Ledger(spec, quant, capacities, {})
    shared = ledger.shared
    home: dict[int, int] = {}
    covered: set[ExpertRef] = set()
    for i, core in sorted(cores, key=lambda c: (-len(c[1]), c[0])):
        core = sorted(core - covered)
        covered.update(core)
        if not core:
            continue
        need = {s: sum(ledger.size(s, e) for e in core) + (0.0 if ledger.assign[s] else shared) for s in servers}
        fit = [s for s in servers if ledger.used[s] + need[s] <= capacities[s] * (1 + 1e-12)]
        rank = lambda s: (-(capacities[s] - ledger.used[s]) * _availability(view, s), s)
        if fit:
            target = min(fit, key=rank)
            for e in core:
                ledger.add(target, e)
            home[i] = target
            continue
        spill = sorted(servers, key=rank)
        home[i] = spill[0]
        for e in core:
            dest = next((s for s in spill if ledger.fits_add(s, e)), None)
            if dest is None:
                left = sum(ledger.size(servers[0], x) for x in core if not any(x in a for a in ledger.assign.values()))
                raise InfeasibleError("could not fit every expert during greedy placement", left)
            ledger.add(dest, e)
    for e in spec.experts():
        if e in covered:
            continue
        dest = next((s for s in sorted(servers, key=lambda s: (ledger.used[s] - capacities[s], s))
                     if ledger.fits_add(s, e)), None)
        if dest is None:
            raise InfeasibleError("could not fit uncovered expert", ledger.size(servers[0], e))
        ledger.add(dest, e)
    return ledger, home


def _mapped_starts(cores, spec, quant, capacities, servers, limit):
    """Every whole-sub-model to server mapping that fits, in lexicographic order, up to ``limit``."""
    if limit <= 0 or len(servers) ** len(cores) > 50 * limit:
        return []
    out = []
    owned = []
    covered: set[ExpertRef] = set()
    for i, core in cores:
        owned.append((i, sorted(core - covered)))
        covered.update(core)
    for combo in itertools.product(servers, repeat=len(owned)):
        ledger = _Ledger(spec, quant, capacities, {})
        ok = True
        for (_, core), s in zip(owned, combo):
            for e in core:
                if not ledger.fits_add(s, e):
                    ok = False
                    break
                ledger.add(s, e)
            if not ok:
                break
        if not ok or len(covered) != spec.num_experts:
            continue
        out.append((ledger, {i: s for (i, _), s in zip(owned, combo)}))
        if len(out) >= limit:
            break
    return out


class _Search:
    """Move/swap local search over single-copy placements.

    Hosts are kept as one index array per layer so that the cost of an expert
    on every server comes out of one vectorised expression. Compound moves are
    priced as sequential single moves, which is exact.
    """

    def __init__(self, model: _ObjectiveModel, ledger: _Ledger, servers: list[int]):
        self.model, self.ledger, self.servers = model, ledger, servers
        spec = model.spec
        self.n_layers, self.n_exp, self.n = spec.num_layers, spec.experts_per_layer, len(servers)
        self.H = [np.full(self.n_exp, -1) for _ in range(self.n_layers)]
        for s, es in ledger.assign.items():
            for e in es:
                self.H[e.layer][e.expert] = model.sidx[s]
        bits = model._bits_fn()
        self.C = []
        for layer in range(self.n_layers):
            c = np.empty((self.n_exp, self.n))
            for e in range(self.n_exp):
                ref = ExpertRef(layer, e)
                for j, srv in enumerate(servers):
                    c[e, j] = spec.top_k * model.expert_time(srv, bits(srv, ref)) + model.shared_time(srv)
            self.C.append(model.alpha * model.pis[layer][:, None] * c)
        self.ar = np.arange(self.n)
        self.tt = model.tt
        self.tol = 1e-12

    def cost(self, layer: int, e: int) -> np.ndarray:
        m = self.model
        v = self.C[layer][e].copy()
        if layer > 0:
            hp = self.H[layer - 1]
            v += m.flows[layer - 1][:, e] @ (m.alpha * self.tt[hp, :] + m.beta * (hp[:, None] != self.ar))
        if layer < self.n_layers - 1:
            hn = self.H[layer + 1]
            v += m.flows[layer][e, :] @ (m.alpha * self.tt[:, hn].T + m.beta * (hn[:, None] != self.ar))
        return v

    def _improves(self, d: float, scale: float) -> bool:
        return d < -self.tol * max(1.0, abs(scale))

    def _apply(self, moves) -> None:
        for layer, e, b in moves:
            a = self.H[layer][e]
            ref = ExpertRef(layer, e)
            self.ledger.remove(self.servers[a], ref)
        for layer, e, b in moves:
            self.ledger.add(self.servers[b], ExpertRef(layer, e))
            self.H[layer][e] = b

    def _fits(self, adds, removes) -> bool:
        """Capacity check for a compound move: bytes added/removed per server index."""
        led = self.ledger
        delta: dict[int, float] = {}
        count: dict[int, int] = {}
        for j, ref in adds:
            srv = self.servers[j]
            delta[srv] = delta.get(srv, 0.0) + led.size(srv, ref)
            count[srv] = count.get(srv, 0) + 1
        for j, ref in removes:
            srv = self.servers[j]
            delta[srv] = delta.get(srv, 0.0) - led.size(srv, ref)
            count[srv] = count.get(srv, 0) - 1
        for srv, d in delta.items():
            n_after = len(led.assign[srv]) + count[srv]
            shared = led.shared if n_after > 0 else 0.0
            base = led.used[srv] - (led.shared if led.assign[srv] else 0.0)
            if base + d + shared > led.cap[srv] * (1 + 1e-12):
                return False
        return True

    def run(self, max_iters: int, small: bool) -> None:
        iters = 0
        while iters < max_iters:
            improved = False
            for layer in range(self.n_layers):
                for e in range(self.n_exp):
                    if self._step(layer, e, small):
                        improved = True
                        iters += 1
                        if iters >= max_iters:
                            return
            if not improved:
                return

    def _step(self, layer: int, e: int, small: bool) -> bool:
        a = int(self.H[layer][e])
        ref = ExpertRef(layer, e)
        v = self.cost(layer, e)
        d = v - v[a]
        best, blocked = None, []
        for b in np.argsort(d, kind="stable"):
            b = int(b)
            if b == a or not self._improves(d[b], v[a]):
                continue
            if self._fits([(b, ref)], [(a, ref)]):
                best = b
                break
            blocked.append(b)
        if best is not None:
            self._apply([(layer, e, best)])
            return True
        return self._swap(layer, e, a, d, v[a], blocked, small) or self._chain(layer, e, a, d, v[a])

    def _swap(self, layer, e, a, d, scale, blocked, small) -> bool:
        ref = ExpertRef(layer, e)
        targets = blocked if not small else [b for b in range(self.n) if b != a]
        best = None
        for b in targets:
            srv = self.servers[b]
            partners = sorted(x for x in self.ledger.assign[srv] if small or x.layer == layer)
            self.H[layer][e] = b
            for f in partners:
                if f == ref:
                    continue
                vf = self.cost(f.layer, f.expert)
                total = d[b] + vf[a] - vf[b]
                if self._improves(total, scale) and (best is None or total < best[0]):
                    if self._fits([(b, ref), (a, f)], [(a, ref), (b, f)]):
                        best = (total, b, f)
            self.H[layer][e] = a
        if best is None:
            return False
        _, b, f = best
        self._apply([(layer, e, b), (f.layer, f.expert, a)])
        return True

    def _chain(self, layer, e, a, d, scale) -> bool:
        """Move ``e`` with its heaviest next-layer partner on the same server."""
        if layer >= self.n_layers - 1:
            return False
        f = self.model.flows[layer][e]
        nxt = self.H[layer + 1]
        cands = [j for j in np.argsort(-f, kind="stable") if f[j] > 0 and nxt[j] == a]
        if not cands:
            return False
        j = int(cands[0])
        ref, jref = ExpertRef(layer, e), ExpertRef(layer + 1, j)
        best = None
        for b in range(self.n):
            if b == a or not self._fits([(b, ref), (b, jref)], [(a, ref), (a, jref)]):
                continue
            self.H[layer][e] = b
            vj = self.cost(layer + 1, j)
            self.H[layer][e] = a
            total = d[b] + vj[b] - vj[a]
            if self._improves(total, scale) and (best is None or total < best[0]):
                best = (total, b)
        if best is None:
            return False
        b = best[1]
        self._apply([(layer, e, b), (layer + 1, j, b)])
        return True


def _local_search(model: _ObjectiveModel, ledger: _Ledger, servers: list[int], max_iters: int) -> None:
    # exhaustive pairwise exchange is quadratic in expert count
    small = model.spec.num_experts <= SMALL_MODEL_EXPERTS
    _Search(model, ledger, servers).run(max_iters, small)


def brute_force_place(spec: MoEModelSpec, topology: EdgeTopology, coact: CoActivationMatrix,
                      quant: QuantPolicy, cost: CostModel, *, capacities: dict[int, float] | None = None,
                      servers: list[int] | None = None, view=None) -> Placement:
    """Exact minimiser over every single-copy assignment (no replication)."""
    servers = sorted(servers if servers is not None else topology.server_ids)
    experts = list(spec.experts())
    if len(servers) ** len(experts) > BRUTE_FORCE_LIMIT:
        raise SizeGuardError(f"{len(servers)}^{len(experts)} assignments exceed {BRUTE_FORCE_LIMIT}")
    if capacities is None:
        capacities = {s: server_capacity(topology.server(s), view) for s in servers}
    model = _ObjectiveModel(spec, topology, coact, quant, cost, servers)
    shared = quant.shared_bytes(spec)
    best = None
    for combo in itertools.product(range(len(servers)), repeat=len(experts)):
        used = [0.0] * len(servers)
        for e, j in zip(experts, combo):
            used[j] += quant.expert_bytes(spec, servers[j], e)
        if any(u and u + shared > capacities[servers[j]] * (1 + 1e-12) for j, u in enumerate(used)):
            continue
        assignment: dict[int, set] = {s: set() for s in servers}
        for e, j in zip(experts, combo):
            assignment[servers[j]].add(e)
        p = Placement.build(assignment)
        value = model.evaluate(p).value
        if best is None or value < best[0] - _EPS:
            best = (value, p)
    if best is None:
        raise InfeasibleError("no capacity-feasible assignment exists",
                              max(0.0, sum(quant.expert_bytes(spec, servers[0], e) for e in experts)
                                  + shared - max(capacities.values())))
    return best[1]


# --- routing ----------------------------------------------------------------


def route_replica(expert: ExpertRef, placement: Placement, current_server: int,
                  view: dict[int, ResourceStatus] | None, *, topology: EdgeTopology, spec: MoEModelSpec,
                  cost: CostModel, quant: QuantPolicy | None = None,
                  local_status: ResourceStatus | None = None) -> int:
    """Pick which copy of ``expert`` serves a token currently on ``current_server``.

    Stays local when the local copy exists and local compute is above the
    low-water mark; otherwise minimises transfer time plus a queue estimate of
    compute time divided by the host's advertised free compute share.
    """
    hosts = placement.hosts(expert)
    if not hosts:
        raise CoverageError(f"{expert} is hosted nowhere")
    if len(hosts) == 1:
        return hosts[0]
    view = view or {}

    def pct(s):
        if s == current_server and local_status is not None:
            return local_status.avail_compute_pct
        st = view.get(s)
        return 100 if st is None else st.avail_compute_pct

    if current_server in hosts and pct(current_server) >= cost.low_water_pct:
        return current_server
    nbytes = cost.activation_bytes(spec)
    best = None
    for h in hosts:
        bits = quant.bits_of(h, expert, 16) if quant is not None else 16
        compute = cost.expert_time(spec, topology.server(h), 1, bits)
        share = max(pct(h) / 100, 1 / cost.queue_clamp)
        total = topology.path_transfer_time(nbytes, current_server, h) + compute / share
        if best is None or total < best[0]:
            best = (total, h)
    return best[1]


def full_placement_quant(placement: Placement, bits: int = 16) -> QuantPolicy:
    return QuantPolicy.uniform(placement, bits)


__all__ = [
    "SubModel",
    "Placement",
    "PlacementObjective",
    "segment_submodels",
    "place",
    "brute_force_place",
    "route_replica",
    "expected_objective",
    "check_placement",
    "internal_mass",
    "server_capacity",
    "uniform_bits",
]
