"""Deployment pipeline: GPU pools, capacities, segmentation, placement and bit-widths."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .compression import QuantPolicy, assign_bitwidths, uniform_bits
from .config import Scenario
from .costs import CostModel
from .edgenet import EdgeTopology, ResourceStatus, expand_gpu_pools
from .errors import ConfigError, InfeasibleError
from .model import CoActivationMatrix, ExpertRef, MoEModelSpec
from .placement import (
    Placement,
    PlacementObjective,
    check_placement,
    expected_objective,
    place,
    segment_submodels,
)


@dataclass
class Deployment:
    topology: EdgeTopology
    compute_nodes: list[int]
    parent: dict[int, int]
    placement: Placement
    quant: QuantPolicy
    objective: PlacementObjective
    capacities: dict[int, float]
    capacity_mode: str

    def gpu_capacity(self, node: int, utilization: float) -> float:
        return self.topology.server(node).gpu_mem_bytes * utilization


class _Popularity:
    def __init__(self, coact: CoActivationMatrix):
        self.m = coact.marginals

    def score(self, e: ExpertRef) -> float:
        return float(self.m[e.layer][e.expert])


def node_capacities(topology: EdgeTopology, nodes, parent, view: dict[int, ResourceStatus] | None,
                    utilization: float, with_ssd: bool) -> dict[int, float]:
    """Bytes each compute node offers, scaled by its server's advertised free GPU memory."""
    out = {}
    for n in nodes:
        s = topology.server(n)
        pct = 100
        if view and parent[n] in view:
            pct = view[parent[n]].avail_gpu_mem_pct
        cap = s.gpu_mem_bytes * utilization * pct / 100
        if with_ssd:
            cap += s.ssd_bytes
        out[n] = cap
    return out


def plan_deployment(spec: MoEModelSpec, topology: EdgeTopology, participants: dict[int, int],
                    coact: CoActivationMatrix, cost: CostModel, *, view: dict[int, ResourceStatus] | None = None,
                    num_submodels: int | None = None, replication_budget: int = 0, utilization: float = 0.9,
                    quantize: bool = False, shared_bits: int = 16, penalty_table=None, allow_ssd: bool = True,
                    intra_latency_s: float = 2e-6, max_iters: int = 1000) -> Deployment:
    """Plan a deployment, relaxing the capacity model step by step.

    Tries 16-bit experts in GPU memory, then (when ``quantize``) mixed
    precision in GPU memory, then 16-bit experts over GPU + SSD with paging.
    """
    nodes_topo, compute, parent = expand_gpu_pools(topology, participants, intra_latency_s)
    k = num_submodels if num_submodels is not None else len(compute)
    k = min(k, spec.experts_per_layer)
    subs = segment_submodels(coact, spec, k, replication_budget)
    attempts = [("gpu", 16)]
    if quantize:
        attempts.append(("gpu", 4))
    if allow_ssd:
        attempts.append(("gpu+ssd", 16))
    last: InfeasibleError | None = None
    for mode, bits in attempts:
        caps = node_capacities(nodes_topo, compute, parent, view, utilization, mode == "gpu+ssd")
        planning = uniform_bits(bits, shared_bits)
        try:
            placement = place(subs, nodes_topo, None, spec, planning, cost, coact,
                              capacities=caps, servers=compute, max_iters=max_iters)
        except InfeasibleError as exc:
            last = exc
            continue
        if bits == 16:
            quant = QuantPolicy.uniform(placement, 16, shared_bits, penalty_table)
        else:
            shared = planning.shared_bytes(spec)
            budgets = {s: caps[s] - shared for s in placement.assignment}
            try:
                quant = assign_bitwidths(_Popularity(coact), placement, spec, budgets, shared_bits, penalty_table)
            except InfeasibleError as exc:
                last = exc
                continue
        problems = check_placement(placement, spec, caps, quant)
        if problems:
            raise AssertionError("; ".join(problems))
        obj = expected_objective(placement, coact, spec, nodes_topo, quant, cost)
        return Deployment(nodes_topo, compute, parent, placement, quant, obj, caps, mode)
    assert last is not None
    raise last


def deployment_for_scenario(scenario: Scenario, coact: CoActivationMatrix, *,
                            view: dict[int, ResourceStatus] | None = None, base_dir=None) -> Deployment:
    dep = scenario.deployment
    topology = scenario.topology.build()
    q = scenario.compression.quantization
    if dep.mode == "fixed":
        return _fixed_deployment(scenario, coact, topology, base_dir)
    return plan_deployment(
        scenario.model, topology, scenario.participants(), coact, scenario.cost, view=view,
        num_submodels=dep.num_submodels, replication_budget=dep.replication_budget,
        utilization=dep.gpu_memory_utilization, quantize=q.enabled, shared_bits=q.shared_bits,
        penalty_table=q.penalty_table, allow_ssd=dep.allow_ssd,
        intra_latency_s=scenario.topology.intra_bus_latency_s, max_iters=dep.max_iters,
    )


def _fixed_deployment(scenario: Scenario, coact, topology, base_dir) -> Deployment:
    dep = scenario.deployment
    base = Path(base_dir) if base_dir else Path(".")

    def read(name):
        p = Path(name)
        return json.loads((p if p.is_absolute() else base / p).read_text())

    spec = scenario.model
    nodes_topo, compute, parent = expand_gpu_pools(topology, scenario.participants(),
                                                   scenario.topology.intra_bus_latency_s)
    placement = Placement.from_json(read(dep.placement_file))
    q = scenario.compression.quantization
    if dep.quant_file:
        quant = QuantPolicy.from_json(read(dep.quant_file))
    else:
        quant = QuantPolicy.uniform(placement, 16, q.shared_bits, q.penalty_table)
    for mode in ("gpu", "gpu+ssd"):
        caps = node_capacities(nodes_topo, compute, parent, None, dep.gpu_memory_utilization, mode == "gpu+ssd")
        problems = check_placement(placement, spec, caps, quant)
        if not problems:
            break
    if problems:
        raise ConfigError("; ".join(problems), "deployment.placement_file")
    obj = expected_objective(placement, coact, spec, nodes_topo, quant, scenario.cost)
    return Deployment(nodes_topo, compute, parent, placement, quant, obj, caps, mode)
