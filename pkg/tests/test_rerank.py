from decimal import Decimal, getcontext

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memq.classifier import ClassDistribution
from memq.rerank import EmptyPool, RerankConfig, composite_score, rerank, sigmoid
from memq.retriever import RankedCandidate
from memq.store import MemType
from oracles import sigmoid_direct

S, E = MemType.SEMANTIC, MemType.EPISODIC


def test_examples():
    assert composite_score(1.0, 0.0) == 0.75
    assert composite_score(0.0, 1e6) == pytest.approx(0.5, abs=1e-15)
    getcontext().prec = 40
    sig = 1 / (1 + (-Decimal(1)).exp())
    expected = Decimal("0.5") * Decimal("0.8") + Decimal("0.5") * sig
    assert composite_score(0.8, 1.0) == pytest.approx(float(expected), abs=1e-15)
    assert round(composite_score(0.8, 1.0), 7) == 0.7655293


def test_sigmoid_stable_for_extremes():
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-30.0) == pytest.approx(sigmoid_direct(-30.0), rel=1e-12)


unit = st.floats(0.0, 1.0)
raw = st.floats(-50.0, 50.0)


@given(unit, unit, raw)
def test_strictly_increasing_in_p(p1, p2, s):
    if p1 <= p2:
        assert composite_score(p1, s) <= composite_score(p2, s)
    if p2 - p1 > 1e-12:
        assert composite_score(p1, s) < composite_score(p2, s)


@given(unit, raw, raw)
def test_strictly_increasing_in_s(p, s1, s2):
    if s1 <= s2:
        assert composite_score(p, s1) <= composite_score(p, s2)
    # strict while sigmoid itself still resolves the difference
    if s1 < s2 and sigmoid(s1) < sigmoid(s2):
        assert composite_score(p, s1) < composite_score(p, s2)


@given(unit, st.floats(-1e6, 1e6))
def test_bounded(p, s):
    assert 0.0 <= composite_score(p, s) <= 1.0


def cands(raws, types, prefix="m"):
    return [RankedCandidate(f"{prefix}{i:02d}", r, t) for i, (r, t) in enumerate(zip(raws, types))]


def test_dominance_with_certain_semantic():
    pool = cands([2.0] * 6, [S, E, S, E, S, E])
    out = rerank(pool, ClassDistribution(1.0, 0.0), RerankConfig(k=6))
    assert [c.mem_type for c in out] == [S, S, S, E, E, E]


def brute(pool, dist, cfg):
    scored = []
    for c in pool:
        p = dist.p_semantic if c.mem_type == S else dist.p_episodic
        scored.append((cfg.alpha * p + cfg.beta * sigmoid_direct(c.raw_score), c))
    scored.sort(key=lambda x: (-x[0], -x[1].raw_score, x[1].item_id))
    return [(c.item_id, v) for v, c in scored[: cfg.k]]


pools = st.lists(st.tuples(st.floats(0.0, 20.0), st.sampled_from([S, E])), min_size=1, max_size=14)


@settings(max_examples=200)
@given(pools, unit, st.integers(1, 10), unit, unit)
def test_matches_brute_force(entries, ps, k, alpha, beta):
    pool = cands([r for r, _ in entries], [t for _, t in entries])
    dist = ClassDistribution(ps, 1.0 - ps)
    cfg = RerankConfig(alpha, beta, k)
    out = rerank(pool, dist, cfg)
    got = [(c.item_id, c.composite_score) for c in out]
    want = brute(pool, dist, cfg)
    assert [i for i, _ in got] == [i for i, _ in want]
    for (_, a), (_, b) in zip(got, want):
        assert abs(a - b) <= 1e-12


@settings(max_examples=200)
@given(pools, st.integers(1, 10))
def test_uniform_distribution_keeps_raw_order(entries, k):
    pool = cands([r for r, _ in entries], [t for _, t in entries])
    out = rerank(pool, ClassDistribution.uniform(), RerankConfig(k=k))
    raw_order = sorted(pool, key=lambda c: (-c.raw_score, c.item_id))[:k]
    assert [c.item_id for c in out] == [c.item_id for c in raw_order]


@settings(max_examples=100)
@given(pools, unit, st.integers(1, 20))
def test_output_subset_and_size(entries, ps, k):
    pool = cands([r for r, _ in entries], [t for _, t in entries])
    out = rerank(pool, ClassDistribution(ps, 1 - ps), RerankConfig(k=k))
    assert len(out) == min(k, len(pool))
    ids = {c.item_id for c in pool}
    assert all(c.item_id in ids for c in out)
    assert all(0.0 <= c.composite_score <= 1.0 for c in out)


def test_empty_pool():
    with pytest.raises(EmptyPool):
        rerank([], ClassDistribution.uniform())


def test_config_validation():
    with pytest.raises(ValueError):
        RerankConfig(alpha=1.5)
    with pytest.raises(ValueError):
        RerankConfig(k=0)


def test_normalize_scores_uses_min_max():
    pool = cands([1.0, 3.0, 5.0], [E, E, S])
    out = rerank(pool, ClassDistribution.uniform(), RerankConfig(k=3, normalize_scores=True))
    assert [c.composite_score for c in out] == [0.75, 0.5, 0.25]


def test_memory_classification_mode():
    pool = cands([1.0, 1.0], [S, E])
    # question is episodic; the memory dists say m00 reads as episodic
    mem = {"m00": ClassDistribution(0.1, 0.9), "m01": ClassDistribution(0.6, 0.4)}
    out = rerank(pool, ClassDistribution(0.2, 0.8), RerankConfig(k=2), memory_dists=mem)
    assert [c.item_id for c in out] == ["m00", "m01"]
