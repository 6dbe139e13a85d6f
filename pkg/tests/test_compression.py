import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemoe.compression import (
    FusionConfig,
    PenaltyLedger,
    PruneConfig,
    QuantPolicy,
    assign_bitwidths,
    fuse_tokens,
    prune_tokens,
    quality_score,
    quantized_bytes,
)
from edgemoe.errors import ConfigError, InfeasibleError
from edgemoe.model import ExpertRef, activation_vectors
from edgemoe.placement import Placement

from _factories import tiny_spec


class Pop:
    def __init__(self, scores):
        self.scores = scores

    def score(self, e):
        return self.scores[e]


def min_clique_cover(vectors, threshold):
    """Exact minimum number of groups whose members are pairwise similar (bitmask DP)."""
    n = len(vectors)
    unit = [v / np.linalg.norm(v) for v in vectors]
    sim = [[float(unit[i] @ unit[j]) >= threshold for j in range(n)] for i in range(n)]
    full = (1 << n) - 1
    clique = [False] * (1 << n)
    clique[0] = True
    for mask in range(1, 1 << n):
        low = (mask & -mask).bit_length() - 1
        rest = mask & (mask - 1)
        clique[mask] = clique[rest] and all(sim[low][j] for j in range(n) if rest >> j & 1)
    best = [0] + [n + 1] * full
    for mask in range(1, full + 1):
        low = mask & -mask
        sub = mask
        while sub:
            if sub & low and clique[sub]:
                best[mask] = min(best[mask], best[mask ^ sub] + 1)
            sub = (sub - 1) & mask
    return best[full]


@settings(max_examples=50, deadline=None)
@given(bits=st.lists(st.sampled_from([4, 8, 16]), min_size=1, max_size=12), size=st.integers(1, 10**9))
def test_resident_bytes_follow_bit_ratio(bits, size):
    spec = tiny_spec(layers=1, experts=len(bits), expert_bytes=size, shared=0)
    experts = [ExpertRef(0, i) for i in range(len(bits))]
    q = QuantPolicy({(1, e): b for e, b in zip(experts, bits)})
    p = Placement.build({1: set(experts)})
    assert p.resident_bytes(1, spec, q) == sum(size * b / 16 for b in bits)


def test_quant_policy_json_round_trip():
    q = QuantPolicy({(1, ExpertRef(0, 1)): 4, (2, ExpertRef(1, 0)): 16}, 8, {16: 0.0, 8: 0.01, 4: 0.1})
    back = QuantPolicy.from_json(q.to_json())
    assert back == q


def test_quant_policy_rejects_unknown_width():
    with pytest.raises(ConfigError):
        QuantPolicy({(1, ExpertRef(0, 0)): 3})


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 10), frac=st.floats(0.25, 1.0), seed=st.integers(0, 10**6))
def test_bitwidths_fit_budget_and_follow_popularity(n, frac, seed):
    spec = tiny_spec(layers=1, experts=n, expert_bytes=1600, shared=0)
    rng = np.random.default_rng(seed)
    experts = [ExpertRef(0, i) for i in range(n)]
    pop = Pop({e: float(rng.random()) for e in experts})
    budget = max(frac, 0.25) * n * 1600
    q = assign_bitwidths(pop, Placement.build({1: set(experts)}), spec, {1: budget})
    assert sum(q.expert_bytes(spec, 1, e) for e in experts) <= budget + 1e-9
    ordered = sorted(experts, key=lambda e: (-pop.score(e), e))
    widths = [q.bits_of(1, e) for e in ordered]
    assert widths == sorted(widths, reverse=True)


def test_bitwidths_full_budget_keeps_16_bits():
    spec = tiny_spec(layers=1, experts=3, expert_bytes=1000, shared=0)
    experts = [ExpertRef(0, i) for i in range(3)]
    q = assign_bitwidths(Pop({e: 1.0 for e in experts}), Placement.build({1: set(experts)}), spec, {1: 3000})
    assert {q.bits_of(1, e) for e in experts} == {16}


def test_bitwidths_infeasible_below_4_bits():
    spec = tiny_spec(layers=1, experts=4, expert_bytes=1600, shared=0)
    experts = [ExpertRef(0, i) for i in range(4)]
    with pytest.raises(InfeasibleError) as exc:
        assign_bitwidths(Pop({e: 1.0 for e in experts}), Placement.build({1: set(experts)}), spec, {1: 1000})
    assert exc.value.shortfall_bytes == pytest.approx(4 * 400 - 1000)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(0, 30), dim=st.integers(2, 6), thr=st.floats(-1, 1), seed=st.integers(0, 10**6))
def test_fusion_conserves_tokens_and_bytes(n, dim, thr, seed):
    vecs = np.random.default_rng(seed).standard_normal((n, dim))
    r = fuse_tokens(vecs, FusionConfig(threshold=thr, enabled=True), 100.0)
    assert sum(r.group_sizes) == n
    assert len(r.membership) == n
    assert r.saved_bytes + r.groups * 100.0 == pytest.approx(n * 100.0)
    assert sorted(set(r.membership)) == list(range(r.groups))


def test_fusion_disabled_is_identity():
    vecs = np.ones((4, 3))
    r = fuse_tokens(vecs, FusionConfig(enabled=False), 10.0)
    assert r.groups == 4 and r.saved_bytes == 0


@pytest.mark.parametrize("seed", range(10))
def test_greedy_fusion_is_exact_on_noise_free_clusters(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    clusters = rng.integers(0, 4, n)
    vecs = activation_vectors(seed, 0, range(n), clusters, 32, noise=0.0)
    r = fuse_tokens(vecs, FusionConfig(threshold=0.95, enabled=True), 1.0)
    assert r.groups == min_clique_cover(vecs, 0.95) == len(set(clusters.tolist()))


def test_clique_oracle_on_known_graph():
    e = np.eye(3)
    vecs = np.array([e[0], e[0] + 0.01 * e[1], e[1], e[2]])
    assert min_clique_cover(vecs, 0.99) == 3


@settings(max_examples=100, deadline=None)
@given(scores=st.lists(st.floats(0, 1), max_size=40), frac=st.floats(0, 1))
def test_prune_fraction_conserves_bytes(scores, frac):
    r = prune_tokens(scores, PruneConfig(fraction=frac, enabled=True), 10.0)
    n = len(scores)
    assert len(r.pruned) == int(np.floor(frac * n))
    assert sorted(r.retained + r.pruned) == list(range(n))
    assert r.retained == sorted(r.retained)
    assert r.saved_bytes + 10.0 * len(r.retained) == pytest.approx(10.0 * n)
    if r.pruned and r.retained:
        assert max(scores[i] for i in r.pruned) <= min(scores[i] for i in r.retained)


def test_prune_threshold():
    r = prune_tokens([0.1, 0.9, 0.4, 0.6], PruneConfig(threshold=0.5, enabled=True, penalty=0.1))
    assert r.pruned == [0, 2] and r.retained == [1, 3]
    assert r.penalty == pytest.approx(0.2)


def test_prune_needs_exactly_one_rule():
    with pytest.raises(ConfigError):
        PruneConfig(enabled=True)
    with pytest.raises(ConfigError):
        PruneConfig(threshold=0.1, fraction=0.2, enabled=True)


def test_quality_score_multiplies_per_token_penalties():
    led = PenaltyLedger(tokens=100, quantization=1.0, fusion=2.0, pruning=0.0)
    assert quality_score(led) == pytest.approx(0.99 * 0.98)
    assert quality_score(PenaltyLedger()) == 1.0
    assert quality_score(PenaltyLedger(tokens=1, pruning=5.0)) == 0.0


@given(a=st.floats(0, 50), b=st.floats(0, 50), c=st.floats(0, 50), n=st.integers(1, 100))
def test_quality_score_in_unit_interval(a, b, c, n):
    s = quality_score(PenaltyLedger(tokens=n, quantization=a, fusion=b, pruning=c))
    assert 0.0 <= s <= 1.0


def test_quantized_bytes():
    for b in (4, 8, 16):
        assert quantized_bytes(1600, b) == 100 * b
