import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemoe.errors import ConfigError, PlacementViolation
from edgemoe.model import ExpertRef, WorkloadParams, estimate_coactivation, generate_trace
from edgemoe.paging import (
    ExpertCacheState,
    PagingConfig,
    PopularityModel,
    access_expert,
    predict_ahead,
    replay_paging,
    schedule_prefetch,
    update_popularity,
)

from _factories import random_coact, tiny_spec


def _cache(budget=300.0, n=6, bw=100.0, pop=None):
    sizes = {ExpertRef(0, i): 100.0 for i in range(n)}
    return ExpertCacheState(1, budget, sizes, bw, pop)


def test_hit_miss_and_inflight_outcomes():
    c = _cache()
    stall, _ = access_expert(c, ExpertRef(0, 0), 0.0)
    assert stall == pytest.approx(1.0) and c.misses == 1
    # still loading: waits for the in-flight copy
    stall, _ = access_expert(c, ExpertRef(0, 0), 0.25)
    assert stall == pytest.approx(0.75)
    stall, _ = access_expert(c, ExpertRef(0, 0), 2.0)
    assert stall == 0.0 and c.hits == 1


def test_loads_share_one_bus():
    c = _cache()
    access_expert(c, ExpertRef(0, 0), 0.0)
    stall, _ = access_expert(c, ExpertRef(0, 1), 0.0)
    assert stall == pytest.approx(2.0)


def test_unplaced_expert_is_a_violation():
    with pytest.raises(PlacementViolation):
        access_expert(_cache(), ExpertRef(3, 0), 0.0)


def test_expert_larger_than_budget_rejected():
    with pytest.raises(ConfigError):
        _cache(budget=50.0)


def test_eviction_prefers_unpopular_then_oldest():
    pop = PopularityModel(np.array([[0.5, 0.3, 0.1, 0.1, 0.0, 0.0]]))
    c = _cache(budget=300.0, pop=pop)
    c.warm([ExpertRef(0, i) for i in range(3)])
    access_expert(c, ExpertRef(0, 3), 0.0)
    assert ExpertRef(0, 2) not in c.resident
    assert set(c.resident) == {ExpertRef(0, 0), ExpertRef(0, 1)}


def test_prefetch_does_not_evict_more_popular_experts():
    pop = PopularityModel(np.array([[0.4, 0.3, 0.2, 0.1, 0.0, 0.0]]))
    c = _cache(budget=200.0, pop=pop)
    c.warm([ExpertRef(0, 0), ExpertRef(0, 1)])
    loads, evicted = schedule_prefetch(c, [ExpertRef(0, 3)], 0.0)
    assert loads == [] and evicted == []


def test_pinned_expert_is_streamed_when_nothing_can_go():
    c = _cache(budget=100.0)
    c.warm([ExpertRef(0, 0)])
    c.pinned = {ExpertRef(0, 0)}
    stall, _ = access_expert(c, ExpertRef(0, 1), 0.0)
    assert stall == pytest.approx(1.0)
    assert ExpertRef(0, 1) not in c.resident and c.used_bytes == 100.0


@settings(max_examples=50, deadline=None)
@given(ops=st.lists(st.tuples(st.booleans(), st.integers(0, 7), st.floats(0, 0.5)), max_size=60),
       budget_slots=st.integers(1, 5))
def test_budget_never_exceeded(ops, budget_slots):
    pop = PopularityModel(np.random.default_rng(len(ops)).random((1, 8)) + 0.01)
    sizes = {ExpertRef(0, i): 100.0 for i in range(8)}
    c = ExpertCacheState(1, 100.0 * budget_slots, sizes, 100.0, pop, strict=True)
    now = 0.0
    for prefetch, e, dt in ops:
        now += dt
        if prefetch:
            schedule_prefetch(c, [ExpertRef(0, e), ExpertRef(0, (e + 1) % 8)], now)
        else:
            access_expert(c, ExpertRef(0, e), now)
        assert c.used_bytes <= c.gpu_budget_bytes + 1e-9


def test_predict_ahead_ranks_are_permutations():
    spec = tiny_spec(layers=4, experts=5, k=2)
    coact = random_coact(spec, 3)
    pop = PopularityModel.from_coactivation(coact)
    ranks = predict_ahead(pop, [0, 1], coact, 0, 3)
    assert len(ranks) == 3
    for r in ranks:
        assert sorted(r.tolist()) == list(range(5))
    # the first look-ahead layer follows summed transition probability
    score = coact.transitions[0][[0, 1]].sum(axis=0)
    assert score[ranks[0][0]] == score.max()
    with pytest.raises(ValueError):
        predict_ahead(pop, [0], coact, 2, 2)
    with pytest.raises(ValueError):
        predict_ahead(pop, [0], coact, 0, 0)


def test_popularity_update_is_pure_and_normalised():
    pop = PopularityModel(np.ones((2, 4)), decay=0.5)
    new = update_popularity(pop, np.array([[0], [3]]))
    assert np.allclose(pop.freq, 0.25)
    assert new.freq[0, 0] == pytest.approx(0.625) and new.freq[1, 3] == pytest.approx(0.625)
    np.testing.assert_allclose(new.freq.sum(axis=1), 1.0)


def test_paging_config_validation():
    with pytest.raises(ConfigError):
        PagingConfig(prefetch_depth=-1)
    with pytest.raises(ConfigError):
        PagingConfig(decay=0.0)


def test_replay_hit_rate_grows_with_budget():
    spec = tiny_spec(layers=4, experts=8, k=2, expert_bytes=1_000_000)
    trace = generate_trace(spec, WorkloadParams(num_requests=10, input_len_range=(20, 20),
                                                output_len_range=(20, 20)), 1)
    coact = estimate_coactivation(trace, spec)
    rates = [replay_paging(trace, spec, coact, gpu_budget_bytes=b * 1e6, bandwidth=1e10,
                           layer_compute_s=1e-5).stats["hit_rate"] for b in (4, 12, 20, 28, 32)]
    assert rates == sorted(rates)
    assert rates[-1] == 1.0
