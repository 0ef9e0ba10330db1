"""Gate, fused-score, and selection tests, including the hand-traced
rank-drop example and the gate-focus bound."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stressrank.rerank import (
    CandidatePool,
    RerankConfig,
    ScoredCandidate,
    SelectionMode,
    defended_score,
    gate_center,
    gate_weight,
    rank_drop_select,
    rerank_pool,
)
from stressrank.signature import PenaltyBreakdown


def _pb(p_dr: float, p_rep: float = 0.0) -> PenaltyBreakdown:
    return PenaltyBreakdown(
        rep=0.5,
        p_rep=p_rep,
        stability_scores=np.array([1.0]),
        c_quantile=0.5,
        p_dr_raw=p_dr,
        p_dr=p_dr,
    )


def test_gate_center_levels():
    # |D| = 100 -> m = 10, level 0.90: the 90th smallest of 0.01..1.00.
    scores = [(i + 1) / 100 for i in range(100)]
    assert gate_center(scores) == pytest.approx(0.90)
    # |D| = 55 -> m = 8, level 1 - 8/55: index 47.
    scores = [(i + 1) / 100 for i in range(55)]
    assert gate_center(scores) == pytest.approx(0.47)


def test_gate_center_degenerate_pools():
    assert gate_center([0.3] * 7) == pytest.approx(0.3)
    assert gate_center([0.42]) == pytest.approx(0.42)
    with pytest.raises(ValueError):
        gate_center([])


def test_gate_weight_closed_forms():
    assert gate_weight(0.5, 0.5) == pytest.approx(0.5)
    assert gate_weight(4.0, 0.0) == pytest.approx(0.9820138, abs=1e-6)
    assert gate_weight(-10.0, 0.0) == pytest.approx(4.54e-5, rel=1e-2)


def test_gate_weight_temperature():
    cfg = RerankConfig(gate_temperature=0.5)
    assert gate_weight(1.0, 0.0, cfg) == pytest.approx(1 / (1 + math.exp(-2.0)))


def test_defended_score_hand_chain():
    cand = ScoredCandidate(passage_id=0, base_score=0.9, penalties=_pb(5.8396, 0.3466))
    cfg = RerankConfig()
    # w = sigma(0.4) ~ 0.598688; s~ = 0.9 - 0.598688 * 6.1862 ~ -2.8036
    assert defended_score(cand, 0.5, cfg) == pytest.approx(-2.8036, abs=1e-3)
    no_gate = RerankConfig(gate_enabled=False)
    assert defended_score(cand, 0.5, no_gate) == pytest.approx(-5.2862, abs=1e-3)


def test_defended_score_zero_penalties_identity():
    cand = ScoredCandidate(passage_id=0, base_score=0.77)
    assert defended_score(cand, 0.2, RerankConfig()) == 0.77


def test_three_candidate_example():
    # Penalty 6 on the leader: it drops below the others whenever w*6 > 0.2.
    cands = (
        ScoredCandidate(passage_id=0, base_score=0.9, penalties=_pb(6.0)),
        ScoredCandidate(passage_id=1, base_score=0.8),
        ScoredCandidate(passage_id=2, base_score=0.7),
    )
    cfg = RerankConfig(k=3)
    ranking = rerank_pool(CandidatePool(query_id=0, candidates=cands), cfg)
    mu = gate_center([0.9, 0.8, 0.7])
    w = gate_weight(0.9, mu, cfg)
    expected_order = [1, 2, 0] if w * 6.0 > 0.2 else [0, 1, 2]
    assert ranking.defended_order() == expected_order
    # Direct Eq.-style arithmetic for the leader.
    rec0 = next(r for r in ranking.records if r.passage_id == 0)
    assert rec0.defended_score == pytest.approx(0.9 - w * 6.0, rel=1e-12)


def test_pool_of_size_k_keeps_everyone():
    cands = tuple(
        ScoredCandidate(passage_id=i, base_score=1.0 - i / 10, penalties=_pb(6.0))
        for i in range(5)
    )
    ranking = rerank_pool(CandidatePool(query_id=0, candidates=cands), RerankConfig(k=5))
    assert sorted(ranking.top_k_ids) == [0, 1, 2, 3, 4]


def test_duplicate_ids_rejected():
    cands = (
        ScoredCandidate(passage_id=0, base_score=0.5),
        ScoredCandidate(passage_id=0, base_score=0.4),
    )
    with pytest.raises(ValueError):
        CandidatePool(query_id=0, candidates=cands)


def test_rank_drop_hand_example():
    # base (a,b,c,d), defended (a,c,d,b), k=3, rho=0.34 -> (a,c,d).
    out = rank_drop_select(["a", "b", "c", "d"], ["a", "c", "d", "b"], 3, 0.34)
    assert out == ["a", "c", "d"]


def test_rank_drop_identity_rankings():
    base = list(range(8))
    out = rank_drop_select(base, base, 4, 0.25)
    # m = 1 zero-drop member removed (largest base rank in the top-k, id 3),
    # refill pulls the next base candidate: ranks <= k + m.
    assert len(out) == 4
    assert all(base.index(p) < 5 for p in out)
    assert out == sorted(out, key=base.index)


def test_rank_drop_m_floor():
    base = list(range(10))
    defended = list(reversed(base))
    out = rank_drop_select(base, defended, 4, 1e-9)
    assert len(out) == 4  # m = max(1, ceil(~0)) = 1


def test_rank_drop_k_exceeds_pool():
    base = [3, 1, 2]
    assert rank_drop_select(base, [2, 1, 3], 7, 0.5) == base


def test_rank_drop_selection_mode_in_rerank():
    cands = (
        ScoredCandidate(passage_id=0, base_score=0.9, penalties=_pb(6.0)),
        ScoredCandidate(passage_id=1, base_score=0.8),
        ScoredCandidate(passage_id=2, base_score=0.7),
        ScoredCandidate(passage_id=3, base_score=0.6),
    )
    cfg = RerankConfig(k=2, selection_mode=SelectionMode.RANK_DROP, rank_drop_rho=0.5)
    ranking = rerank_pool(CandidatePool(query_id=0, candidates=cands), cfg)
    assert len(ranking.top_k_ids) == 2
    assert 0 not in ranking.top_k_ids  # the penalized leader was dropped


def _random_pool(rng, with_penalties: bool) -> CandidatePool:
    n = int(rng.integers(2, 30))
    cands = []
    for i in range(n):
        pb = None
        if with_penalties and rng.random() < 0.5:
            pb = _pb(float(rng.uniform(0, 6)), float(rng.uniform(0, 18)))
        cands.append(
            ScoredCandidate(passage_id=i, base_score=float(rng.uniform(-1, 1)), penalties=pb)
        )
    return CandidatePool(query_id=0, candidates=tuple(cands))


def test_zero_penalty_identity_property():
    rng = np.random.default_rng(11)
    cfg = RerankConfig(k=5)
    for _ in range(1000):
        pool = _random_pool(rng, with_penalties=False)
        ranking = rerank_pool(pool, cfg)
        assert ranking.defended_order() == ranking.base_order()
        assert list(ranking.top_k_ids) == ranking.base_order()[: min(5, len(pool.candidates))]


def test_gate_focus_property():
    # Candidates far below the gate center receive a correction bounded by
    # sigma(-10) * (C + 18.42) < 1.2e-3 regardless of their penalties.
    bound = (1 / (1 + math.exp(10.0))) * (6.0 + 18.42)
    assert bound < 1.2e-3
    rng = np.random.default_rng(13)
    cfg = RerankConfig()
    for _ in range(1000):
        mu = float(rng.uniform(-1, 1))
        s = mu - 10.0 - float(rng.uniform(0, 5))
        cand = ScoredCandidate(
            passage_id=0,
            base_score=s,
            penalties=_pb(float(rng.uniform(0, 6)), float(rng.uniform(0, 18.42 - 6))),
        )
        assert abs(defended_score(cand, mu, cfg) - s) <= bound


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_monotone_penalty_damage(seed):
    rng = np.random.default_rng(seed)
    pool = _random_pool(rng, with_penalties=True)
    cfg = RerankConfig()
    target = int(rng.integers(0, len(pool.candidates)))
    ranking = rerank_pool(pool, cfg)
    before = next(r.defended_rank for r in ranking.records if r.passage_id == target)

    old = pool.candidates[target]
    base_dr = old.penalties.p_dr if old.penalties else 0.0
    bumped = ScoredCandidate(
        passage_id=old.passage_id,
        base_score=old.base_score,
        penalties=_pb(base_dr + float(rng.uniform(0.1, 3.0)),
                      old.penalties.p_rep if old.penalties else 0.0),
    )
    cands = list(pool.candidates)
    cands[target] = bumped
    ranking2 = rerank_pool(CandidatePool(query_id=0, candidates=tuple(cands)), cfg)
    after = next(r.defended_rank for r in ranking2.records if r.passage_id == target)
    assert after >= before


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1),
       shift=st.floats(-5, 5, allow_nan=False, allow_infinity=False))
def test_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    pool = _random_pool(rng, with_penalties=True)
    cfg = RerankConfig()
    shifted = CandidatePool(
        query_id=0,
        candidates=tuple(
            ScoredCandidate(
                passage_id=c.passage_id,
                base_score=c.base_score + shift,
                penalties=c.penalties,
            )
            for c in pool.candidates
        ),
    )
    a = rerank_pool(pool, cfg)
    b = rerank_pool(shifted, cfg)
    assert a.defended_order() == b.defended_order()
    for ra, rb in zip(
        sorted(a.records, key=lambda r: r.passage_id),
        sorted(b.records, key=lambda r: r.passage_id),
    ):
        assert rb.gate_weight == pytest.approx(ra.gate_weight, rel=1e-9, abs=1e-12)


def test_rerank_determinism():
    rng = np.random.default_rng(17)
    pool = _random_pool(rng, with_penalties=True)
    cfg = RerankConfig()
    assert rerank_pool(pool, cfg) == rerank_pool(pool, cfg)


def test_nan_base_score_rejected():
    with pytest.raises(ValueError):
        ScoredCandidate(passage_id=0, base_score=float("nan"))
