import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemoe.compression import QuantPolicy, uniform_bits
from edgemoe.costs import CostModel
from edgemoe.edgenet import EdgeTopology, LinkSpec, ResourceStatus, ServerSpec
from edgemoe.errors import ConfigError, CoverageError, InfeasibleError, SizeGuardError
from edgemoe.model import ExpertRef
from edgemoe.placement import (
    Placement,
    SubModel,
    brute_force_place,
    check_placement,
    expected_objective,
    internal_mass,
    place,
    route_replica,
    segment_submodels,
)

from _factories import oracle_instance, random_coact, server, star, tiny_spec

Q16 = uniform_bits(16)
COST = CostModel()


def _oracle_objective(placement, coact, spec, topo, cost):
    """Loop-by-loop expected latency and crossings for a single-copy placement."""
    host = {e: placement.hosts(e)[0] for e in spec.experts()}
    act = spec.token_activation_bytes
    lat = 0.0
    for e in spec.experts():
        s = topo.server(host[e])
        lat += coact.marginals[e.layer][e.expert] * (spec.top_k * cost.expert_time(spec, s) + cost.shared_time(spec, s))
    cross = 0.0
    for layer in range(spec.num_layers - 1):
        f = coact.flow(layer)
        for i in range(spec.experts_per_layer):
            for j in range(spec.experts_per_layer):
                a, b = host[ExpertRef(layer, i)], host[ExpertRef(layer + 1, j)]
                if a != b:
                    cross += f[i, j]
                    lat += f[i, j] * topo.path_transfer_time(act, a, b)
    return lat, cross


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), layers=st.integers(2, 3), experts=st.integers(2, 4))
def test_expected_objective_matches_loop_oracle(seed, layers, experts):
    spec = tiny_spec(layers=layers, experts=experts)
    coact = random_coact(spec, seed)
    topo = star(3)
    rng = np.random.default_rng(seed)
    assignment = {s: set() for s in (1, 2, 3)}
    for e in spec.experts():
        assignment[int(rng.integers(1, 4))].add(e)
    p = Placement.build(assignment)
    obj = expected_objective(p, coact, spec, topo, Q16, COST)
    lat, cross = _oracle_objective(p, coact, spec, topo, COST)
    assert obj.expected_latency_s == pytest.approx(lat, rel=1e-9)
    assert obj.expected_cross_transitions == pytest.approx(cross, rel=1e-9, abs=1e-12)
    assert obj.value == pytest.approx(lat + COST.beta(spec, topo) * cross, rel=1e-9)


def test_objective_requires_coverage():
    spec = tiny_spec()
    p = Placement.build({1: {ExpertRef(0, 0)}})
    with pytest.raises(CoverageError):
        expected_objective(p, random_coact(spec, 0), spec, star(2), Q16, COST)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), layers=st.integers(1, 4), experts=st.integers(2, 9), k=st.integers(1, 4),
       budget=st.integers(0, 6))
def test_segmentation_partitions_and_caps(seed, layers, experts, k, budget):
    k = min(k, experts)
    spec = tiny_spec(layers=layers, experts=experts)
    coact = random_coact(spec, seed)
    subs = segment_submodels(coact, spec, k, budget)
    cores = [sm.core() for sm in subs]
    assert set().union(*cores) == set(spec.experts())
    assert sum(len(c) for c in cores) == spec.num_experts
    cap = math.ceil(experts / k) + 1
    for sm in subs:
        core_by_layer = [sum(1 for e in sm.core() if e.layer == layer) for layer in range(layers)]
        assert all(1 <= c <= cap for c in core_by_layer)
    assert sum(len(sm.replicas) for sm in subs) <= budget


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), layers=st.integers(2, 3), experts=st.integers(3, 7), k=st.integers(2, 3))
def test_segmentation_is_exchange_optimal(seed, layers, experts, k):
    spec = tiny_spec(layers=layers, experts=experts)
    coact = random_coact(spec, seed)
    subs = segment_submodels(coact, spec, k)
    base = internal_mass(subs, coact)
    for layer in range(layers):
        for s, t in itertools.combinations(range(k), 2):
            for a in subs[s].layers[layer]:
                for b in subs[t].layers[layer]:
                    trial = [list(map(set, sm.layers)) for sm in subs]
                    trial[s][layer] = (trial[s][layer] - {a}) | {b}
                    trial[t][layer] = (trial[t][layer] - {b}) | {a}
                    moved = [SubModel(tuple(frozenset(x) for x in ls)) for ls in trial]
                    assert internal_mass(moved, coact) <= base + 1e-9


def test_replicas_are_nested_in_budget():
    spec = tiny_spec(layers=3, experts=6)
    coact = random_coact(spec, 4)
    prev = set()
    for budget in range(0, 8):
        reps = {(rank, e) for sm in segment_submodels(coact, spec, 3, budget) for rank, e in sm.replicas}
        assert prev <= reps
        prev = reps


def test_segmentation_rejects_too_many_submodels():
    spec = tiny_spec(experts=3)
    with pytest.raises(InfeasibleError):
        segment_submodels(random_coact(spec, 0), spec, 4)
    with pytest.raises(ConfigError):
        segment_submodels(random_coact(spec, 0), spec, 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_place_never_beats_brute_force_and_is_valid(seed):
    spec, topo, coact, caps = oracle_instance(seed)
    try:
        best = brute_force_place(spec, topo, coact, Q16, COST, capacities=caps)
    except InfeasibleError:
        return
    p = place(segment_submodels(coact, spec, 3), topo, None, spec, Q16, COST, coact, capacities=caps)
    assert check_placement(p, spec, caps, QuantPolicy.uniform(p)) == []
    ours = expected_objective(p, coact, spec, topo, Q16, COST).value
    opt = expected_objective(best, coact, spec, topo, Q16, COST).value
    assert opt <= ours + 1e-12


def test_single_server_has_no_crossings():
    spec = tiny_spec(layers=3, experts=4, k=2)
    topo = EdgeTopology([server(1, gpu=1e6)], [])
    coact = random_coact(spec, 1)
    p = place(segment_submodels(coact, spec, 1), topo, None, spec, Q16, COST, coact)
    assert expected_objective(p, coact, spec, topo, Q16, COST).expected_cross_transitions == 0


def test_place_reports_shortfall():
    spec = tiny_spec(layers=2, experts=3, expert_bytes=1000, shared=500)
    topo = star(2, gpu=2000)
    coact = random_coact(spec, 0)
    with pytest.raises(InfeasibleError) as exc:
        place(segment_submodels(coact, spec, 2), topo, None, spec, Q16, COST, coact)
    # 6000 bytes of experts against 2 * (2000 - 500) usable
    assert exc.value.shortfall_bytes == pytest.approx(3000)


def test_brute_force_size_guard():
    spec = tiny_spec(layers=4, experts=4)
    topo = star(3)
    with pytest.raises(SizeGuardError):
        brute_force_place(spec, topo, random_coact(spec, 0), Q16, COST)


def test_replication_never_worsens_objective():
    spec = tiny_spec(layers=3, experts=4, k=2, expert_bytes=100, shared=50)
    topo = star(3, gpu=1e5)
    coact = random_coact(spec, 9)
    values = []
    for budget in (0, 2, 4, 8):
        p = place(segment_submodels(coact, spec, 3, budget), topo, None, spec, Q16, COST, coact)
        assert check_placement(p, spec, {s: 1e5 for s in (1, 2, 3)}, QuantPolicy.uniform(p)) == []
        values.append(expected_objective(p, coact, spec, topo, Q16, COST).value)
    assert values[1] <= values[0] + 1e-15


def test_view_reduces_capacity():
    spec = tiny_spec(layers=2, experts=4, expert_bytes=1000, shared=0)
    topo = star(2, gpu=8000)
    coact = random_coact(spec, 2)
    view = {1: ResourceStatus(100, 25)}
    p = place(segment_submodels(coact, spec, 2), topo, view, spec, Q16, COST, coact)
    assert len(p.assignment.get(1, ())) <= 2


def test_placement_json_round_trip():
    p = Placement.build({1: {ExpertRef(0, 1), ExpertRef(1, 0)}, 2: {ExpertRef(0, 0)}})
    assert Placement.from_json(p.to_json()) == p


def test_checker_flags_violations():
    spec = tiny_spec(layers=1, experts=2, expert_bytes=1000, shared=500)
    p = Placement({1: frozenset({ExpertRef(0, 0)})}, frozenset())
    problems = check_placement(p, spec, {1: 100}, QuantPolicy.uniform(p))
    text = " ".join(problems)
    assert "coverage" in text and "shared" in text


def _two_copy_setup():
    spec = tiny_spec(layers=1, experts=1)
    servers = [ServerSpec(i, 1e9, 1, 1, 1e12, 1e9, mem_bandwidth=1e11) for i in (1, 2, 3)]
    topo = EdgeTopology(servers, [LinkSpec(1, 2, 1e9, 1e-3), LinkSpec(1, 3, 1e9, 1e-4)])
    e = ExpertRef(0, 0)
    return spec, topo, e, Placement.build({2: {e}, 3: {e}})


def test_route_prefers_local_copy_until_low_water():
    spec, topo, e, p = _two_copy_setup()
    assert route_replica(e, p, 2, None, topology=topo, spec=spec, cost=COST) == 2
    busy = ResourceStatus(5, 100)
    # below the low-water mark the local queue estimate competes with the remote copy
    slow = CostModel(compute_efficiency=1e-6)
    assert route_replica(e, p, 2, None, topology=topo, spec=spec, cost=slow, local_status=busy) == 3
    assert route_replica(e, p, 2, None, topology=topo, spec=spec, cost=COST, local_status=busy) == 2


def test_route_picks_cheapest_remote_copy():
    spec, topo, e, p = _two_copy_setup()
    assert route_replica(e, p, 1, None, topology=topo, spec=spec, cost=COST) == 3
    loaded = {3: ResourceStatus(1, 100)}
    slow = CostModel(compute_efficiency=1e-6)
    assert route_replica(e, p, 1, loaded, topology=topo, spec=spec, cost=slow) == 2


def test_route_requires_a_host():
    spec, topo, e, _ = _two_copy_setup()
    with pytest.raises(CoverageError):
        route_replica(e, Placement.build({}), 1, None, topology=topo, spec=spec, cost=COST)
