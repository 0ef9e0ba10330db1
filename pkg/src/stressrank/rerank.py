"""Score-gated penalty fusion, defended ranking, and Top-K selection.

The gate center sits at an upper-tail quantile of the base-score
distribution so the penalty correction only bites in the region that
decides Top-K membership.  Candidates without penalties degrade to the
undefended baseline.  All sorts carry a deterministic tie-break
(base score descending, then passage id ascending) so identical inputs
produce byte-identical rankings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from stressrank.signature import PenaltyBreakdown, nearest_rank_index


class Label(str, Enum):
    CLEAN = "clean"
    POISON = "poison"
    UNKNOWN = "unknown"


class SelectionMode(str, Enum):
    FUSED_SCORE = "fused_score"
    RANK_DROP = "rank_drop"


@dataclass(frozen=True)
class ScoredCandidate:
    passage_id: int
    base_score: float
    penalties: PenaltyBreakdown | None = None
    label: Label = Label.UNKNOWN

    def __post_init__(self) -> None:
        if not math.isfinite(self.base_score):
            raise ValueError(f"base_score must be finite, got {self.base_score}")


@dataclass(frozen=True)
class CandidatePool:
    """One query with its scored, labeled candidates."""

    query_id: int
    candidates: tuple[ScoredCandidate, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        ids = [c.passage_id for c in self.candidates]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate passage ids in pool")


@dataclass(frozen=True)
class RerankConfig:
    k: int = 5
    gate_enabled: bool = True
    dr_enabled: bool = True
    rep_enabled: bool = True
    gate_temperature: float = 1.0
    selection_mode: SelectionMode = SelectionMode.FUSED_SCORE
    rank_drop_rho: float = 0.25

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.gate_temperature > 0:
            raise ValueError("gate_temperature must be positive")
        if not 0 < self.rank_drop_rho <= 1:
            raise ValueError("rank_drop_rho must lie in (0, 1]")


@dataclass(frozen=True)
class CandidateRecord:
    passage_id: int
    base_score: float
    gate_weight: float
    penalty_sum: float
    defended_score: float
    base_rank: int
    defended_rank: int
    label: Label = Label.UNKNOWN


@dataclass(frozen=True)
class DefendedRanking:
    query_id: int
    records: tuple[CandidateRecord, ...]
    top_k_ids: tuple[int, ...]

    def base_order(self) -> list[int]:
        return [r.passage_id for r in sorted(self.records, key=lambda r: r.base_rank)]

    def defended_order(self) -> list[int]:
        return [r.passage_id for r in sorted(self.records, key=lambda r: r.defended_rank)]


def gate_center(base_scores: Sequence[float]) -> float:
    """Upper-tail quantile of the base scores used as the gate midpoint.

    Uses the nearest-rank quantile at level 1 - m/|D| with m = ceil(sqrt(|D|)).
    For pools too small for the quantile index to exist (|D| < 4) the maximum
    score is used instead.
    """
    scores = np.asarray(base_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("gate_center of empty pool")
    n = scores.size
    if n == 1:
        return float(scores[0])
    m = math.ceil(math.sqrt(n) - 1e-9)
    level = 1.0 - m / n
    idx = nearest_rank_index(level, n)
    if idx < 1:
        return float(scores.max())
    return float(np.sort(scores)[idx - 1])


def gate_weight(score: float, mu: float, cfg: RerankConfig | None = None) -> float:
    """Logistic gate sigma((s - mu) / temperature), in (0, 1)."""
    temperature = cfg.gate_temperature if cfg is not None else 1.0
    x = (score - mu) / temperature
    # Numerically stable logistic.
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def penalty_sum(candidate: ScoredCandidate, cfg: RerankConfig) -> float:
    p = candidate.penalties
    if p is None:
        return 0.0
    total = 0.0
    if cfg.dr_enabled:
        total += p.p_dr
    if cfg.rep_enabled:
        total += p.p_rep
    return total


def defended_score(candidate: ScoredCandidate, mu: float, cfg: RerankConfig) -> float:
    """Fused score: base minus gated penalty sum (gate weight 1 when disabled)."""
    w = gate_weight(candidate.base_score, mu, cfg) if cfg.gate_enabled else 1.0
    return candidate.base_score - w * penalty_sum(candidate, cfg)


def rerank_pool(pool: CandidatePool, cfg: RerankConfig) -> DefendedRanking:
    """Compute the defended ranking and Top-K for one query pool."""
    cands = pool.candidates
    if not cands:
        raise ValueError("rerank_pool of empty pool")
    mu = gate_center([c.base_score for c in cands])

    scored = []
    for c in cands:
        w = gate_weight(c.base_score, mu, cfg) if cfg.gate_enabled else 1.0
        psum = penalty_sum(c, cfg)
        s_def = c.base_score - w * psum
        if math.isnan(s_def):
            raise ValueError(f"NaN defended score for passage {c.passage_id}")
        scored.append((c, w, psum, s_def))

    base_sorted = sorted(scored, key=lambda t: (-t[0].base_score, t[0].passage_id))
    base_rank = {t[0].passage_id: i + 1 for i, t in enumerate(base_sorted)}
    def_sorted = sorted(scored, key=lambda t: (-t[3], -t[0].base_score, t[0].passage_id))
    def_rank = {t[0].passage_id: i + 1 for i, t in enumerate(def_sorted)}

    records = tuple(
        CandidateRecord(
            passage_id=c.passage_id,
            base_score=c.base_score,
            gate_weight=w,
            penalty_sum=psum,
            defended_score=s_def,
            base_rank=base_rank[c.passage_id],
            defended_rank=def_rank[c.passage_id],
            label=c.label,
        )
        for c, w, psum, s_def in scored
    )

    k = min(cfg.k, len(cands))
    base_order = [t[0].passage_id for t in base_sorted]
    def_order = [t[0].passage_id for t in def_sorted]
    if cfg.selection_mode is SelectionMode.RANK_DROP:
        top_k = rank_drop_select(base_order, def_order, cfg.k, cfg.rank_drop_rho)
    else:
        top_k = def_order[:k]
    return DefendedRanking(query_id=pool.query_id, records=records, top_k_ids=tuple(top_k))


def rank_drop_select(
    base_ranking: Sequence[int],
    defended_ranking: Sequence[int],
    k: int,
    rho_sel: float,
) -> list[int]:
    """Conservative context selection by largest defended rank drops.

    Starting from the base Top-K, the m = max(1, ceil(rho_sel*k)) members
    pushed down furthest by the defended ranking are removed (ties: larger
    base rank removed first) and the set is refilled from the base ranking
    top-down, re-admitting removed members in ascending rank-drop order only
    when no fresh candidates remain.  Output in base-ranking order.
    """
    if not 0 < rho_sel <= 1:
        raise ValueError("rho_sel must lie in (0, 1]")
    ids = list(base_ranking)
    if set(ids) != set(defended_ranking):
        raise ValueError("base and defended rankings must cover the same ids")
    if k >= len(ids):
        return ids

    b_rank = {p: i + 1 for i, p in enumerate(base_ranking)}
    d_rank = {p: i + 1 for i, p in enumerate(defended_ranking)}
    delta = {p: max(0, d_rank[p] - b_rank[p]) for p in ids}

    selected = set(ids[:k])
    m = max(1, math.ceil(rho_sel * k - 1e-9))
    m = min(m, k)
    removal_order = sorted(selected, key=lambda p: (-delta[p], -b_rank[p]))
    removed = removal_order[:m]
    selected -= set(removed)

    for p in base_ranking:
        if len(selected) >= k:
            break
        if p in selected or p in removed:
            continue
        selected.add(p)
    if len(selected) < k:
        # Pool exhausted: re-admit removed members, least suspicious first.
        for p in sorted(removed, key=lambda q: (delta[q], b_rank[q])):
            if len(selected) >= k:
                break
            selected.add(p)

    return [p for p in base_ranking if p in selected]
