"""Deterministic discrete-event simulation of distributed MoE inference."""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .compression import PenaltyLedger, QuantPolicy, fuse_tokens, prune_tokens, quality_score, quantized_bytes
from .config import ReplanTriggerConfig, Scenario
from .costs import CostModel
from .edgenet import HELLO_SIZE, EdgeTopology, PerceptionAgent, ResourceStatus, neighbor_view, transfer_time
from .errors import InfeasibleError, UpgradeUnavailableError
from .model import (
    CoActivationMatrix,
    ExpertRef,
    MoEModelSpec,
    RoutingTrace,
    estimate_coactivation,
    generate_trace,
    synthesize_activations,
)
from .paging import ExpertCacheState, PopularityModel, access_expert, paging_stats, predict_ahead, schedule_prefetch
from .placement import Placement, route_replica
from .planner import Deployment, deployment_for_scenario, plan_deployment

REPORT_FORMAT = "edgemoe-report"
REPORT_VERSION = 1

# event kinds, in tie-break priority order
TRANSFER, LOAD, LAYER, HELLO, REPLAN, ARRIVAL = range(6)
KIND_NAMES = ("TransferComplete", "LoadComplete", "LayerComplete", "HelloTick", "ReplanCheck", "RequestArrival")

__all__ = [
    "ReplanTriggerConfig",
    "SimReport",
    "Simulator",
    "simulate",
    "check_replan",
    "total_variation",
    "precision_upgrade",
    "migration_moves",
    "Move",
]


class Stamp:
    """A point in simulated time plus the critical-path breakdown that led to it."""

    __slots__ = ("t", "compute", "stall", "transfer", "queue")

    def __init__(self, t, compute=0.0, stall=0.0, transfer=0.0, queue=0.0):
        self.t = t
        self.compute = compute
        self.stall = stall
        self.transfer = transfer
        self.queue = queue

    def copy(self) -> "Stamp":
        return Stamp(self.t, self.compute, self.stall, self.transfer, self.queue)

    def wait(self, until: float) -> None:
        if until > self.t:
            self.queue += until - self.t
            self.t = until

    def components(self) -> tuple[float, float, float, float]:
        return (self.compute, self.stall, self.transfer, self.queue)


def _latest(stamps) -> Stamp:
    best = None
    for s in stamps:
        if best is None or s.t > best.t:
            best = s
    return best


# --- dynamic updating -------------------------------------------------------


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Largest per-layer total-variation distance between two (layers, experts) distributions."""
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    return float((0.5 * np.abs(p - q).sum(axis=1)).max())


def check_replan(now: float, baseline: np.ndarray, current: np.ndarray,
                 baseline_view: dict[int, ResourceStatus], current_view: dict[int, ResourceStatus],
                 config: ReplanTriggerConfig) -> bool:
    if total_variation(current, baseline) > config.tv_threshold:
        return True
    for sid in sorted(set(baseline_view) | set(current_view)):
        a = baseline_view.get(sid, ResourceStatus(100, 100))
        b = current_view.get(sid, ResourceStatus(100, 100))
        if (abs(a.avail_compute_pct - b.avail_compute_pct) > config.resource_threshold_pct
                or abs(a.avail_gpu_mem_pct - b.avail_gpu_mem_pct) > config.resource_threshold_pct):
            return True
    return False


CLOUD = "cloud"


def precision_upgrade(expert: ExpertRef, target_bits: int, requester: int, placement: Placement,
                      quant: QuantPolicy, topology: EdgeTopology, spec: MoEModelSpec,
                      current_bits: int | None = None) -> tuple[int | str, float]:
    """Cheapest source for a higher-precision copy: a peer holding >= target bits, or the cloud."""
    cur = current_bits if current_bits is not None else quant.bits_of(requester, expert, 16)
    if target_bits not in (8, 16) or target_bits <= cur:
        raise UpgradeUnavailableError(f"cannot upgrade {expert} from {cur} to {target_bits} bits")
    size = quantized_bytes(spec.expert_param_bytes, target_bits)
    best = None
    for peer in placement.hosts(expert):
        if peer == requester or quant.bits_of(peer, expert, 16) < target_bits:
            continue
        t = topology.path_transfer_time(size, peer, requester)
        if best is None or t < best[1]:
            best = (peer, t)
    if topology.cloud_link is not None:
        t = transfer_time(spec.expert_param_bytes, topology.cloud_link)
        if best is None or t < best[1]:
            best = (CLOUD, t)
    if best is None:
        raise UpgradeUnavailableError(f"no peer holds {expert} at >= {target_bits} bits and no cloud uplink")
    return best


@dataclass
class Move:
    expert: ExpertRef
    dest: int
    source: int | str
    bits: int
    nbytes: float
    seconds: float


def migration_moves(old: Placement, old_quant: QuantPolicy, new: Placement, new_quant: QuantPolicy,
                    topology: EdgeTopology, spec: MoEModelSpec) -> list[Move]:
    """Expert copies the new plan needs that the old one does not already provide in place."""
    moves = []
    for dest in sorted(new.assignment):
        for e in sorted(new.assignment[dest]):
            bits = new_quant.bits_of(dest, e, 16)
            if e in old.assignment.get(dest, ()):
                have = old_quant.bits_of(dest, e, 16)
                if have == bits:
                    continue
                if have > bits:
                    continue  # narrowing happens in place
                src, secs = precision_upgrade(e, bits, dest, old, old_quant, topology, spec, have)
                nbytes = spec.expert_param_bytes if src == CLOUD else quantized_bytes(spec.expert_param_bytes, bits)
                moves.append(Move(e, dest, src, bits, nbytes, secs))
                continue
            nbytes = quantized_bytes(spec.expert_param_bytes, bits)
            holders = [h for h in old.hosts(e) if old_quant.bits_of(h, e, 16) >= bits]
            if holders:
                src = min(holders, key=lambda h: (topology.path_transfer_time(nbytes, h, dest), h))
                moves.append(Move(e, dest, src, bits, nbytes, topology.path_transfer_time(nbytes, src, dest)))
            else:
                src, secs = _from_cloud(e, bits, topology, spec)
                moves.append(Move(e, dest, src, bits, spec.expert_param_bytes if src == CLOUD else nbytes, secs))
    return moves


def _from_cloud(e, bits, topology, spec):
    if topology.cloud_link is not None:
        return CLOUD, transfer_time(spec.expert_param_bytes, topology.cloud_link)
    raise UpgradeUnavailableError(f"no source for {e} at {bits} bits")


# --- report -----------------------------------------------------------------


@dataclass
class RequestRecord:
    index: int
    input_len: int
    output_len: int
    arrival_s: float
    end_s: float = 0.0
    components: tuple = (0.0, 0.0, 0.0, 0.0)
    version: int = 0

    @property
    def latency_s(self) -> float:
        return self.end_s - self.arrival_s


@dataclass
class SimReport:
    data: dict
    requests: list[RequestRecord]
    token_latencies: list[tuple[int, int, float, tuple]]
    throughput_rows: list[tuple[int, int]]
    events_log: list[dict] = field(default_factory=list)

    @property
    def avg_generation_throughput(self) -> float:
        return self.data["summary"]["avg_generation_throughput"]

    @property
    def avg_latency_s(self) -> float:
        return self.data["summary"]["avg_latency_s"]

    def bucket(self, input_len: int, output_len: int) -> dict:
        for b in self.data["buckets"]:
            if b["input_len"] == input_len and b["output_len"] == output_len:
                return b
        raise KeyError((input_len, output_len))

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    def requests_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["request", "input_len", "output_len", "arrival_s", "end_s", "latency_s",
                    "compute_s", "stall_s", "transfer_s", "queue_s", "placement_version"])
        for r in self.requests:
            w.writerow([r.index, r.input_len, r.output_len, repr(r.arrival_s), repr(r.end_s), repr(r.latency_s),
                        *(repr(c) for c in r.components), r.version])
        return buf.getvalue()

    def throughput_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_start_s", "output_tokens"])
        for b, n in self.throughput_rows:
            w.writerow([b, n])
        return buf.getvalue()

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events_log)


# --- engine -----------------------------------------------------------------


class _Version:
    """A placement plus everything derived from it that the engine needs."""

    def __init__(self, number: int, dep: Deployment, sim: "Simulator"):
        self.number = number
        self.dep = dep
        self.placement = dep.placement
        self.quant = dep.quant
        spec = sim.spec
        self.single: list[list[int | None]] = []
        for layer in range(spec.num_layers):
            row = []
            for e in range(spec.experts_per_layer):
                hosts = self.placement.hosts(ExpertRef(layer, e))
                row.append(hosts[0] if len(hosts) == 1 else None)
            self.single.append(row)
        self.homes = sorted(self.placement.shared_hosts)
        self.caches: dict[int, ExpertCacheState] = {}
        if sim.paging.enabled:
            shared = self.quant.shared_bytes(spec)
            for node in sorted(self.placement.assignment):
                server = dep.topology.server(node)
                budget = sim.paging.gpu_budget_bytes
                if budget is None:
                    budget = server.gpu_mem_bytes * sim.scenario.deployment.gpu_memory_utilization - shared
                sizes = {e: self.quant.expert_bytes(spec, node, e) for e in self.placement.assignment[node]}
                cache = ExpertCacheState(node, budget, sizes, server.intra_bus_bandwidth, sim.popularity)
                cache.warm(sorted(sizes, key=lambda e: (-sim.popularity.score(e), e)))
                self.caches[node] = cache


class _Unit:
    """One pass of a request through all layers: its prefill batch or one decode token."""

    __slots__ = ("request", "tokens", "anchors", "stamp", "start", "decode_index", "version", "prev_hosts")

    def __init__(self, request, tokens, anchors, stamp, decode_index, version):
        self.request = request
        self.tokens = tokens
        self.anchors = anchors
        self.stamp = stamp
        self.start = stamp.copy()
        self.decode_index = decode_index
        self.version = version
        # token -> hosts that served its experts at the previous layer
        self.prev_hosts: dict[int, list[int]] = {}


class Simulator:
    def __init__(self, scenario: Scenario, seed: int | None = None, *, trace: RoutingTrace | None = None,
                 deployment: Deployment | None = None, coact: CoActivationMatrix | None = None, base_dir=None):
        scenario.validate()
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.spec = spec = scenario.model
        self.cost: CostModel = scenario.cost
        self.paging = scenario.paging
        self.trace = trace if trace is not None else generate_trace(spec, scenario.workload, self.seed)
        self.trace.validate(spec)
        self.coact = coact if coact is not None else estimate_coactivation(self.trace, spec)
        self.popularity = PopularityModel.from_coactivation(self.coact, scenario.paging.decay)
        self.phys = scenario.topology.build()
        dep = deployment if deployment is not None else deployment_for_scenario(scenario, self.coact,
                                                                                base_dir=base_dir)
        self.topology = dep.topology
        self.parent = dep.parent
        self.versions = [_Version(0, dep, self)]
        self.active = 0
        self.pending: tuple[int, float] | None = None
        self.sel = self.trace.selections.tolist()
        self.importance = self.trace.importance
        self.node_free: dict[int, float] = {n: 0.0 for n in self.topology.server_ids}
        self.link_free: dict[tuple[int, int], float] = {}
        self.queue: list = []
        self.seq = 0
        self.now = 0.0
        self.event_counts: Counter = Counter()
        self.events_log: list[dict] = []
        self.record_events = scenario.report.record_events
        self.ledger = PenaltyLedger()
        self.cross = [0, 0.0]
        # expert-to-expert transitions whose hosts differ, weighted 1/k^2 per token pair set
        self.pair_cross = 0.0
        self.pass_tokens = 0
        self.intra = [0, 0.0]
        self.saved_bytes = 0.0
        self.expert_compute_s = 0.0
        self.compute_s = 0.0
        self.peak_resident: dict[int, float] = {}
        self.records: list[RequestRecord] = []
        self.token_rows: list[tuple[int, int, float, tuple]] = []
        self.output_times: list[float] = []
        self.remaining = len(self.trace.requests)
        self.next_request = 0
        self.replans = 0
        self.replan_log: list[dict] = []
        self.warnings: list[dict] = []
        self.migration_bytes = 0.0
        self.recent = deque(maxlen=scenario.replan.window_tokens)
        self._route_cache: dict = {}
        # perception
        pc = scenario.perception
        self.agents = {s: PerceptionAgent(s, pc.threshold_pct, pc.period_s) for s in self.phys.server_ids}
        self.inbox: dict[int, dict] = {s: {} for s in self.phys.server_ids}
        self.views: dict[int, dict[int, ResourceStatus]] = {s: {} for s in self.phys.server_ids}
        self.background: dict[int, ResourceStatus] = {s: ResourceStatus(100, 100) for s in self.phys.server_ids}
        self.script = sorted(pc.events, key=lambda ev: (ev.time_s, ev.server))
        self.hello_msgs = 0
        self.hello_bytes = 0
        self.plan_pop = np.stack(self.coact.marginals)
        self.plan_view = self._planner_view()
        self._note_peak(self.versions[0])

    # -- queue ---------------------------------------------------------------

    def _push(self, t: float, kind: int, payload=None) -> None:
        self.seq += 1
        heapq.heappush(self.queue, (t, kind, self.seq, payload))

    def _log(self, t, kind, **info):
        self.event_counts[KIND_NAMES[kind]] += 1
        if self.record_events:
            self.events_log.append({"t": t, "kind": KIND_NAMES[kind], **info})

    # -- resources -----------------------------------------------------------

    def _compute(self, stamp: Stamp, node: int, dur: float) -> Stamp:
        st = stamp.copy()
        st.wait(self.node_free[node])
        st.t += dur
        st.compute += dur
        self.node_free[node] = st.t
        self.compute_s += dur
        return st

    def _send(self, stamp: Stamp, src: int, dst: int, nbytes: float, what: str = "activation") -> Stamp:
        st = stamp.copy()
        for u, v in self.topology.path(src, dst):
            ln = self.topology.link(u, v)
            st.wait(self.link_free.get((u, v), 0.0))
            ser = nbytes / ln.bandwidth
            self.link_free[(u, v)] = st.t + ser
            st.t += ser + ln.latency
            st.transfer += ser + ln.latency
        counter = self.cross if self.parent[src] != self.parent[dst] else self.intra
        counter[0] += 1
        counter[1] += nbytes
        self._push(st.t, TRANSFER, None)
        if self.record_events:
            self.events_log.append({"t": st.t, "kind": "TransferScheduled", "src": src, "dst": dst,
                                    "bytes": nbytes, "what": what})
        return st

    # -- perception ----------------------------------------------------------

    def _status(self, server: int) -> ResourceStatus:
        return self.background[server]

    def _planner_view(self) -> dict[int, ResourceStatus]:
        """Resources as the lowest-id participating server perceives them, itself included."""
        me = min(self.scenario.participants())
        view = dict(self.views[me])
        view[me] = self._status(me)
        return view

    def _node_view(self, anchor: int) -> dict[int, ResourceStatus]:
        server = self.parent[anchor]
        view = self.views[server]
        out = {}
        for node, p in self.parent.items():
            if p == server:
                out[node] = self._status(server)
            elif p in view:
                out[node] = view[p]
        return out

    def _hello_tick(self, now: float) -> None:
        while self.script and self.script[0].time_s <= now:
            ev = self.script.pop(0)
            cur = self.background[ev.server]
            self.background[ev.server] = ResourceStatus(
                cur.avail_compute_pct if ev.avail_compute_pct is None else ev.avail_compute_pct,
                cur.avail_gpu_mem_pct if ev.avail_gpu_mem_pct is None else ev.avail_gpu_mem_pct,
            )
        changed = False
        for sid in self.phys.server_ids:
            msg = self.agents[sid].tick(self._status(sid), now)
            if msg is None:
                continue
            for nb in self.phys.neighbors(sid):
                self.hello_msgs += 1
                self.hello_bytes += HELLO_SIZE
                # only the newest message per sender matters to the receiver
                self.inbox[nb][sid] = msg
                changed = True
        if changed:
            for sid in self.phys.server_ids:
                self.views[sid] = neighbor_view(sid, self.inbox[sid].values())
            self._route_cache.clear()

    # -- routing -------------------------------------------------------------

    def _host(self, ver: _Version, layer: int, expert: int, anchor: int) -> int:
        h = ver.single[layer][expert]
        if h is not None:
            return h
        key = (ver.number, layer, expert, anchor)
        h = self._route_cache.get(key)
        if h is None:
            h = route_replica(ExpertRef(layer, expert), ver.placement, anchor, self._node_view(anchor),
                              topology=self.topology, spec=self.spec, cost=self.cost, quant=ver.quant)
            self._route_cache[key] = h
        return h

    # -- layer step ----------------------------------------------------------

    def _act_bytes(self, bits: int) -> float:
        return self.cost.activation_bytes(self.spec, bits)

    def _layer(self, unit: _Unit, layer: int) -> Stamp:
        ver = self.versions[unit.version]
        spec, cost, quant = self.spec, self.cost, ver.quant
        k = spec.top_k
        S = unit.stamp
        sel = self.sel
        by_anchor: dict[int, list[int]] = {}
        for t, a in zip(unit.tokens, unit.anchors):
            by_anchor.setdefault(a, []).append(t)
        finals: list[Stamp] = []
        new_anchor: dict[int, int] = {}
        table = quant.penalty_table
        prefill = unit.decode_index < 0
        cur_hosts: dict[int, list[int]] = {}
        inv_k2 = 1.0 / (k * k)
        for a in sorted(by_anchor):
            toks = by_anchor[a]
            server = self.topology.server(a)
            Sa = self._compute(S, a, cost.shared_time(spec, server, len(toks), quant.shared_bits))
            # host -> expert -> tokens
            plan: dict[int, dict[int, list[int]]] = {}
            for t in toks:
                experts = sel[t][layer]
                hs = []
                for j, e in enumerate(experts):
                    h = self._host(ver, layer, e, a)
                    hs.append(h)
                    plan.setdefault(h, {}).setdefault(e, []).append(t)
                    if j == 0:
                        new_anchor[t] = h
                cur_hosts[t] = hs
                prev = unit.prev_hosts.get(t)
                if prev:
                    self.pair_cross += inv_k2 * sum(hp != hc for hp in prev for hc in hs)
            host_done: dict[int, Stamp] = {}
            group_of: dict[int, dict[int, int]] = {}
            for h in sorted(plan):
                experts = plan[h]
                h_server = self.topology.server(h)
                if h == a:
                    Sh = Sa
                    members = None
                else:
                    send = sorted({t for ts in experts.values() for t in ts})
                    bits = max(quant.bits_of(h, ExpertRef(layer, e), 16) for e in experts)
                    per_tok = self._act_bytes(bits)
                    members, n_groups = self._compress(send, layer, per_tok, prefill)
                    group_of[h] = members
                    Sh = self._send(Sa, a, h, n_groups * per_tok)
                done = Sh
                for e in sorted(experts):
                    ref = ExpertRef(layer, e)
                    ts = experts[e]
                    if members is not None:
                        eff = len({members[t] for t in ts if t in members})
                    else:
                        eff = len(ts)
                    bits = quant.bits_of(h, ref, 16)
                    Se = Sh.copy()
                    cache = ver.caches.get(h)
                    if cache is not None and eff > 0:
                        stall, _ = access_expert(cache, ref, Se.t)
                        if stall > 0:
                            Se.t += stall
                            Se.stall += stall
                            self._push(Se.t, LOAD, None)
                    dur = cost.expert_time(spec, h_server, eff, bits)
                    self.expert_compute_s += dur
                    if dur > 0:
                        Se = self._compute(Se, h, dur)
                    done = Se if Se.t >= done.t else done
                    self.ledger.activations_by_bits[bits] = self.ledger.activations_by_bits.get(bits, 0) + len(ts)
                    self.ledger.quantization += len(ts) * table.get(bits, 0.0) / k
                host_done[h] = done
            # gather partial results at each token's new anchor
            flows: dict[tuple[int, int], int] = {}
            for t in toks:
                na = new_anchor[t]
                srcs = {self._host(ver, layer, e, a) for e in sel[t][layer]}
                srcs.add(a)
                for h in srcs:
                    if h != na:
                        flows[(h, na)] = flows.get((h, na), 0) + 1
            landed = list(host_done.values())
            for (h, na), n in sorted(flows.items()):
                origin = host_done.get(h, Sa)
                members = group_of.get(h)
                if members is not None:
                    n = min(n, len(set(members.values())))
                landed.append(self._send(origin, h, na, n * self._act_bytes(16), "result"))
            finals.append(_latest(landed))
        self.ledger.tokens += len(unit.tokens)
        if layer == 0:
            self.pass_tokens += len(unit.tokens)
        unit.prev_hosts = cur_hosts
        unit.anchors = [new_anchor[t] for t in unit.tokens]
        end = _latest(finals)
        self._observe(unit, layer, end.t, ver)
        return end

    def _compress(self, tokens: list[int], layer: int, per_tok: float, prefill: bool):
        """Prune then fuse a remote dispatch batch; returns (token -> group, group count)."""
        comp = self.scenario.compression
        n = len(tokens)
        if not prefill or n <= 1 or not (comp.prune.enabled or comp.fusion.enabled):
            return {t: i for i, t in enumerate(tokens)}, n
        kept = tokens
        if comp.prune.enabled:
            res = prune_tokens(self.importance[tokens], comp.prune, per_tok, tokens)
            kept = [tokens[i] for i in res.retained]
            self.saved_bytes += res.saved_bytes
            self.ledger.pruning += res.penalty
            self.ledger.pruned_tokens += len(res.pruned)
        members = {t: i for i, t in enumerate(kept)}
        groups = len(kept)
        if comp.fusion.enabled and len(kept) > 1:
            vecs = synthesize_activations(self.trace, self.spec, max(layer - 1, 0), kept)
            fr = fuse_tokens(vecs, comp.fusion, per_tok)
            members = {t: g for t, g in zip(kept, fr.membership)}
            groups = fr.groups
            self.saved_bytes += fr.saved_bytes
            self.ledger.fusion += fr.penalty
            self.ledger.fused_tokens += len(kept) - groups
        return members, groups

    def _observe(self, unit: _Unit, layer: int, now: float, ver: _Version) -> None:
        sel = self.sel
        for t in unit.tokens:
            self.popularity.observe_layer(layer, sel[t][layer])
        depth = min(self.paging.prefetch_depth, self.spec.num_layers - layer - 1)
        if not ver.caches or depth <= 0:
            return
        if len(unit.tokens) == 1:
            current = list(sel[unit.tokens[0]][layer])
        else:
            counts = Counter(e for t in unit.tokens for e in sel[t][layer])
            current = [e for e, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:self.spec.top_k]]
        ranks = predict_ahead(self.popularity, current, self.coact, layer, depth, self.paging.blend)
        per_node: dict[int, list[ExpertRef]] = {}
        for i, r in enumerate(ranks):
            lay = layer + 1 + i
            for e in r[:self.spec.top_k]:
                ref = ExpertRef(lay, int(e))
                for h in ver.placement.hosts(ref):
                    per_node.setdefault(h, []).append(ref)
        for node in sorted(per_node):
            cache = ver.caches.get(node)
            if cache is None:
                continue
            loads, _ = schedule_prefetch(cache, per_node[node], now)
            for ld in loads:
                self._push(ld.completion, LOAD, None)

    # -- request lifecycle ---------------------------------------------------

    def _start_request(self, r: int, now: float) -> None:
        if self.pending is not None and now >= self.pending[1]:
            self.active = self.pending[0]
            self.pending = None
        ver = self.versions[self.active]
        n_in, n_out = self.trace.requests[r]
        home = ver.homes[r % len(ver.homes)]
        rec = RequestRecord(r, n_in, n_out, now, version=ver.number)
        self.records.append(rec)
        stamp = Stamp(now)
        ins, _ = self.trace.request_tokens(r)
        if n_in > 0:
            unit = _Unit(r, list(ins), [home] * n_in, stamp, -1, ver.number)
        elif n_out > 0:
            unit = self._decode_unit(r, 0, stamp, home, ver.number)
        else:
            self._finish_request(r, stamp)
            return
        unit.stamp = self._layer(unit, 0)
        self._push(unit.stamp.t, LAYER, (unit, 0))

    def _decode_unit(self, r, i, stamp, home, version) -> _Unit:
        _, outs = self.trace.request_tokens(r)
        return _Unit(r, [outs[i]], [home], stamp, i, version)

    def _layer_done(self, unit: _Unit, layer: int) -> None:
        if layer + 1 < self.spec.num_layers:
            unit.stamp = self._layer(unit, layer + 1)
            self._push(unit.stamp.t, LAYER, (unit, layer + 1))
            return
        ver = self.versions[unit.version]
        r = unit.request
        home = ver.homes[r % len(ver.homes)]
        # the last position's hidden state returns home for the LM head
        last = unit.anchors[-1]
        stamp = unit.stamp
        if last != home:
            stamp = self._send(stamp, last, home, self._act_bytes(16), "result")
        if unit.decode_index >= 0:
            self.output_times.append(stamp.t)
            delta = tuple(b - a for a, b in zip(unit.start.components(), stamp.components()))
            self.token_rows.append((r, unit.decode_index, stamp.t - unit.start.t, delta))
            for t in unit.tokens:
                self.recent.append(self.trace.selections[t])
        else:
            for t in unit.tokens:
                self.recent.append(self.trace.selections[t])
        n_out = self.trace.requests[r][1]
        nxt = unit.decode_index + 1
        if nxt < n_out:
            du = self._decode_unit(r, nxt, stamp, home, unit.version)
            du.stamp = self._layer(du, 0)
            self._push(du.stamp.t, LAYER, (du, 0))
        else:
            self._finish_request(r, stamp)

    def _finish_request(self, r: int, stamp: Stamp) -> None:
        rec = self.records[-1] if self.records[-1].index == r else next(x for x in self.records if x.index == r)
        rec.end_s = stamp.t
        rec.components = stamp.components()
        self.remaining -= 1
        if self.scenario.workload.arrival_interval_s == 0 and self.next_request < len(self.trace.requests):
            self._push(stamp.t, ARRIVAL, self.next_request)
            self.next_request += 1
        for v in self.versions:
            self._note_peak(v)

    def _note_peak(self, ver: _Version) -> None:
        shared = ver.quant.shared_bytes(self.spec)
        for node in ver.placement.assignment:
            cache = ver.caches.get(node)
            if cache is not None:
                used = cache.peak_bytes + shared
            else:
                used = ver.placement.resident_bytes(node, self.spec, ver.quant)
            self.peak_resident[node] = max(self.peak_resident.get(node, 0.0), used)

    # -- replanning ----------------------------------------------------------

    def _replan_check(self, now: float) -> None:
        cfg = self.scenario.replan
        if self.pending is not None or not self.recent:
            return
        view = self._planner_view()
        # a half-full window is too noisy to compare against the plan's baseline
        full = len(self.recent) >= max(1, cfg.window_tokens // 2)
        current = self._window_shares() if full else self.plan_pop
        if not check_replan(now, self.plan_pop, current, self.plan_view, view, cfg):
            return
        self.replan(now, view)

    def _window_shares(self) -> np.ndarray:
        sel = np.stack(list(self.recent))
        e = self.spec.experts_per_layer
        counts = np.stack([np.bincount(sel[:, layer, :].ravel(), minlength=e) for layer in range(sel.shape[1])])
        return counts / counts.sum(axis=1, keepdims=True)

    def replan(self, now: float, view: dict[int, ResourceStatus] | None = None) -> bool:
        """Re-plan from recent routing and the current view; returns whether a new plan was queued."""
        view = self._planner_view() if view is None else view
        sel = np.stack(list(self.recent)).astype(np.int16)
        window = RoutingTrace(self.spec.spec_hash(), self.seed, [(len(sel), 0)], sel, np.zeros(len(sel)), 0)
        coact = estimate_coactivation(window, self.spec)
        sc = self.scenario
        q = sc.compression.quantization
        old = self.versions[self.active]
        try:
            dep = plan_deployment(
                self.spec, self.phys, sc.participants(), coact, self.cost, view=view,
                num_submodels=sc.deployment.num_submodels, replication_budget=sc.deployment.replication_budget,
                utilization=sc.deployment.gpu_memory_utilization, quantize=q.enabled, shared_bits=q.shared_bits,
                penalty_table=q.penalty_table, allow_ssd=sc.deployment.allow_ssd,
                intra_latency_s=sc.topology.intra_bus_latency_s, max_iters=sc.deployment.max_iters)
            moves = migration_moves(old.placement, old.quant, dep.placement, dep.quant, self.topology, self.spec)
        except (InfeasibleError, UpgradeUnavailableError) as exc:
            self.warnings.append({"t": now, "warning": f"replan kept old plan: {exc}"})
            self._log(now, REPLAN, warning=str(exc))
            return False
        ready = now
        for mv in moves:
            st = Stamp(now)
            if mv.source == CLOUD:
                st.t += mv.seconds
            else:
                st = self._send(st, mv.source, mv.dest, mv.nbytes, "migration")
            ready = max(ready, st.t)
            self.migration_bytes += mv.nbytes
        ver = _Version(len(self.versions), dep, self)
        self.versions.append(ver)
        self.pending = (ver.number, ready)
        self.replans += 1
        self.replan_log.append({"t": now, "active_at": ready, "moves": len(moves),
                                "bytes": sum(m.nbytes for m in moves), "version": ver.number})
        self.plan_pop = np.stack(coact.marginals)
        self.plan_view = view
        self._note_peak(ver)
        return True

    # -- main loop -----------------------------------------------------------

    def run(self) -> SimReport:
        wl = self.scenario.workload
        n = len(self.trace.requests)
        if wl.arrival_interval_s == 0:
            if n:
                self._push(0.0, ARRIVAL, 0)
                self.next_request = 1
        else:
            for r in range(n):
                self._push(r * wl.arrival_interval_s, ARRIVAL, r)
            self.next_request = n
        if self.scenario.perception.enabled:
            self._push(0.0, HELLO, None)
        if self.scenario.replan.enabled:
            self._push(self.scenario.replan.check_period_s, REPLAN, None)
        while self.queue:
            t, kind, _, payload = heapq.heappop(self.queue)
            self.now = t
            if kind == LAYER:
                self._log(t, kind, request=payload[0].request, layer=payload[1])
                self._layer_done(*payload)
            elif kind == ARRIVAL:
                self._log(t, kind, request=payload)
                self._start_request(payload, t)
            elif kind == HELLO:
                self._log(t, kind)
                self._hello_tick(t)
                if self.remaining > 0:
                    self._push(t + self.scenario.perception.tick_s, HELLO, None)
            elif kind == REPLAN:
                self._log(t, kind)
                self._replan_check(t)
                if self.remaining > 0:
                    self._push(t + self.scenario.replan.check_period_s, REPLAN, None)
            else:
                self._log(t, kind)
        return self._report()

    def _report(self) -> SimReport:
        recs = self.records
        lat = np.array([r.latency_s for r in recs]) if recs else np.zeros(1)
        out_tokens = sum(r.output_len for r in recs)
        in_tokens = sum(r.input_len for r in recs)
        makespan = max((r.end_s for r in recs), default=0.0)
        first = min((r.arrival_s for r in recs), default=0.0)
        span = makespan - first
        comps = np.array([r.components for r in recs]).sum(axis=0) if recs else np.zeros(4)
        buckets = {}
        for r in recs:
            buckets.setdefault((r.input_len, r.output_len), []).append(r)
        bucket_rows = []
        for (i, o), rs in sorted(buckets.items()):
            ls = np.array([x.latency_s for x in rs])
            dur = float(ls.sum())
            bucket_rows.append({
                "input_len": i,
                "output_len": o,
                "requests": len(rs),
                "avg_latency_s": float(ls.mean()),
                "p95_latency_s": float(np.percentile(ls, 95)),
                "avg_generation_throughput": (o * len(rs) / dur) if dur > 0 else 0.0,
            })
        paging = {}
        hits = misses = pf = 0
        stall_total = 0.0
        loaded = 0.0
        for ver in self.versions:
            for node, cache in sorted(ver.caches.items()):
                st = paging_stats(cache)
                paging[f"v{ver.number}:{node}"] = st
                hits += cache.hits
                misses += cache.misses
                pf += cache.prefetch_hits
                stall_total += st["total_stall_s"]
                loaded += cache.bytes_loaded
        all_stalls = [s for v in self.versions for c in v.caches.values() for s in c.stalls]
        bin_w = self.scenario.report.throughput_bin_s
        bins = Counter(int(math.floor(t / bin_w)) for t in self.output_times)
        rows = [(b, bins.get(b, 0)) for b in range(0, (max(bins) + 1) if bins else 0)]
        ver0 = self.versions[0]
        data = {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "scenario": self.scenario.name,
            "seed": self.seed,
            "summary": {
                "requests": len(recs),
                "input_tokens": in_tokens,
                "output_tokens": out_tokens,
                "makespan_s": makespan,
                "avg_generation_throughput": out_tokens / span if span > 0 else 0.0,
                "avg_latency_s": float(lat.mean()),
                "p95_latency_s": float(np.percentile(lat, 95)),
            },
            "latency_components_s": dict(zip(("compute", "stall", "transfer", "queue"), map(float, comps))),
            "transfers": {
                "cross_server": {"count": self.cross[0], "bytes": self.cross[1]},
                "intra_server": {"count": self.intra[0], "bytes": self.intra[1]},
                "crossings_per_token": self.pair_cross / self.pass_tokens if self.pass_tokens else 0.0,
                "saved_bytes": self.saved_bytes,
                "migration_bytes": self.migration_bytes,
            },
            "hello": {"messages": self.hello_msgs, "bytes": self.hello_bytes},
            "paging": {
                "enabled": self.paging.enabled,
                "hits": hits,
                "misses": misses,
                "prefetch_hits": pf,
                "hit_rate": hits / (hits + misses) if hits + misses else 1.0,
                "mean_stall_s": float(np.mean(all_stalls)) if all_stalls else 0.0,
                "p95_stall_s": float(np.percentile(all_stalls, 95)) if all_stalls else 0.0,
                "total_stall_s": stall_total,
                "bytes_loaded": loaded,
                "per_cache": paging,
            },
            "quality": {"score": quality_score(self.ledger), "penalties": self.ledger.as_dict()},
            "peak_resident_bytes": {str(k): v for k, v in sorted(self.peak_resident.items())},
            "expert_compute_s": self.expert_compute_s,
            "compute_s": self.compute_s,
            "replans": self.replans,
            "replan_log": self.replan_log,
            "warnings": self.warnings,
            "events": dict(sorted(self.event_counts.items())),
            "placement": {
                "capacity_mode": ver0.dep.capacity_mode,
                "objective": ver0.dep.objective.as_dict(),
                "nodes": sorted(ver0.placement.assignment),
                "expert_copies": ver0.placement.copies(),
            },
            "buckets": bucket_rows,
        }
        return SimReport(data, recs, self.token_rows, rows, self.events_log)


def simulate(scenario: Scenario, seed: int | None = None, **kwargs) -> SimReport:
    return Simulator(scenario, seed, **kwargs).run()
