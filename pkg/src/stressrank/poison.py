"""Synthetic corpora and greedy optimization-driven poisoned passages.

The corpus generator anchors each query's clean passages on a shared topic
token set so base-score rankings are non-degenerate.  The attack performs
greedy coordinate ascent on the base score: per iteration it exactly
re-scores candidate token replacements for every mutable slot (over a
gradient-ranked shortlist for large vocabularies, full scan otherwise) and
applies the single best edit.  Exactness is cheap here because positions in
the toy encoder never interact before pooling, so one edit shifts the
pooled vector by a precomputable per-token feature difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stressrank.encoder import (
    MARKER_TOKEN,
    TinyEncoderParams,
    TokenSeq,
    encode,
    token_feature_table,
)
from stressrank.rerank import Label

FULL_SCAN_VOCAB_LIMIT = 1024


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_queries: int = 100
    clean_per_query: int = 50
    poisons_per_query: int = 5
    query_len: int = 8
    passage_len: int = 30
    topic_size: int = 24
    topic_dispersion: float = 1.0
    vocab_size: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.num_queries, self.clean_per_query) < 1 or self.poisons_per_query < 0:
            raise ValueError("corpus counts must be positive")
        if self.query_len < 2 or self.passage_len < 2:
            raise ValueError("sequences need the marker plus at least one content token")
        if not self.topic_dispersion > 0:
            raise ValueError("topic_dispersion must be positive")


@dataclass(frozen=True)
class PoisonRecipe:
    budget_iters: int = 30
    edit_positions: int = 30
    shortlist_size: int = 16

    def __post_init__(self) -> None:
        if self.budget_iters < 0:
            raise ValueError("budget_iters must be non-negative")
        if self.edit_positions < 1:
            raise ValueError("edit_positions must be at least 1")
        if self.shortlist_size < 1:
            raise ValueError("shortlist_size must be at least 1")


@dataclass(frozen=True)
class LabeledPassage:
    passage_id: int
    seq: TokenSeq
    label: Label
    attack_succeeded: bool | None = None  # None for clean passages


@dataclass(frozen=True)
class CorpusQuery:
    query_id: int
    query: TokenSeq
    passages: tuple[LabeledPassage, ...]


@dataclass(frozen=True)
class AttackTrace:
    """Greedy attack diagnostics: accepted-edit score trajectory."""

    scores: tuple[float, ...]  # score after init and after each accepted edit
    edits: tuple[tuple[int, int, int], ...]  # (slot, old_token, new_token)
    succeeded: bool
    threshold: float | None


def gen_corpus(spec: SyntheticCorpusSpec) -> list[CorpusQuery]:
    """Generate per-query clean pools from query-anchored token distributions.

    Each query owns a topic token subset; its tokens are drawn from the
    topic, and every clean passage mixes topic tokens (with a per-passage
    rate shrunk by ``topic_dispersion``) with uniform background tokens.
    The spread of per-passage rates keeps the ranking non-degenerate.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xC0F0, spec.seed]))
    queries: list[CorpusQuery] = []
    content = np.arange(1, spec.vocab_size)
    for qid in range(spec.num_queries):
        topic = rng.choice(content, size=spec.topic_size, replace=False)
        q_tokens = (MARKER_TOKEN,) + tuple(rng.choice(topic, size=spec.query_len - 1))
        passages = []
        for pid in range(spec.clean_per_query):
            on_rate = rng.uniform(0.2, 0.9) / spec.topic_dispersion
            n_content = spec.passage_len - 1
            on_topic = rng.random(n_content) < on_rate
            toks = np.where(
                on_topic,
                rng.choice(topic, size=n_content),
                rng.choice(content, size=n_content),
            )
            passages.append(
                LabeledPassage(
                    passage_id=pid,
                    seq=TokenSeq((MARKER_TOKEN,) + tuple(int(t) for t in toks)),
                    label=Label.CLEAN,
                )
            )
        queries.append(CorpusQuery(query_id=qid, query=TokenSeq(q_tokens), passages=tuple(passages)))
    return queries


def pooled_scores(
    pool: CorpusQuery, params: TinyEncoderParams, table: np.ndarray | None = None
) -> dict[int, float]:
    """Base scores of every passage in a pool via the per-token feature table."""
    if table is None:
        table = token_feature_table(params)
    q_hat = encode(pool.query, params)
    scores: dict[int, float] = {}
    for passage in pool.passages:
        pooled = table[np.asarray(passage.seq.tokens)].mean(axis=0)
        scores[passage.passage_id] = float(pooled @ q_hat / np.linalg.norm(pooled))
    return scores


def craft_poison(
    query: TokenSeq,
    recipe: PoisonRecipe,
    params: TinyEncoderParams,
    seed: int = 0,
    success_threshold: float | None = None,
    table: np.ndarray | None = None,
) -> tuple[TokenSeq, AttackTrace]:
    """Greedy coordinate-ascent poison maximizing the base score for a query.

    Starts from random content tokens behind the marker; one best edit per
    iteration; stops at the budget or when no edit improves the score.  The
    success flag compares the final score against ``success_threshold``
    (typically the query's 5th-highest clean score); failures are kept and
    labeled, never raised.
    """
    if table is None:
        table = token_feature_table(params)
    rng = np.random.default_rng(np.random.SeedSequence([0xAD_0C, abs(int(seed))]))
    n_slots = recipe.edit_positions
    tokens = np.empty(n_slots + 1, dtype=np.int64)
    tokens[0] = MARKER_TOKEN
    tokens[1:] = rng.integers(1, params.vocab_size, size=n_slots)
    t_total = n_slots + 1

    q_hat = encode(query, params)
    content_ids = np.arange(1, params.vocab_size)

    def score_of(pooled: np.ndarray) -> float:
        return float(pooled @ q_hat / np.linalg.norm(pooled))

    pooled = table[tokens].mean(axis=0)
    current = score_of(pooled)
    scores = [current]
    edits: list[tuple[int, int, int]] = []

    for _ in range(recipe.budget_iters):
        best_gain = 0.0
        best_edit: tuple[int, int, float] | None = None  # (slot, token, new score)
        for slot in range(1, t_total):
            old = tokens[slot]
            base = pooled - table[old] / t_total
            if params.vocab_size <= FULL_SCAN_VOCAB_LIMIT:
                cand_ids = content_ids
            else:
                # Gradient-ranked shortlist: rank tokens by alignment with the
                # score gradient w.r.t. this slot's pooled contribution.
                direction = (q_hat - pooled * (pooled @ q_hat) / (pooled @ pooled))
                order = np.argsort(table[content_ids] @ direction)[::-1]
                cand_ids = content_ids[order[: recipe.shortlist_size]]
            cand_pool = base[None, :] + table[cand_ids] / t_total
            cand_scores = cand_pool @ q_hat / np.linalg.norm(cand_pool, axis=1)
            j = int(np.argmax(cand_scores))
            gain = float(cand_scores[j]) - current
            if gain > best_gain:
                best_gain = gain
                best_edit = (slot, int(cand_ids[j]), float(cand_scores[j]))
        if best_edit is None:
            break
        slot, new_token, new_score = best_edit
        edits.append((slot, int(tokens[slot]), new_token))
        tokens[slot] = new_token
        pooled = table[tokens].mean(axis=0)
        current = score_of(pooled)
        scores.append(current)

    succeeded = success_threshold is None or current > success_threshold
    trace = AttackTrace(
        scores=tuple(scores),
        edits=tuple(edits),
        succeeded=succeeded,
        threshold=success_threshold,
    )
    return TokenSeq(tuple(int(t) for t in tokens)), trace


def attack_corpus(
    corpus: list[CorpusQuery],
    recipe: PoisonRecipe,
    params: TinyEncoderParams,
    poisons_per_query: int,
    seed: int = 0,
) -> list[CorpusQuery]:
    """Pooled-poison protocol: craft poisons per query and add them to the pool."""
    table = token_feature_table(params)
    attacked: list[CorpusQuery] = []
    for pool in corpus:
        clean_scores = sorted(
            (s for p, s in pooled_scores(pool, params, table).items()), reverse=True
        )
        threshold_idx = min(4, len(clean_scores) - 1)
        threshold = clean_scores[threshold_idx]
        next_pid = max(p.passage_id for p in pool.passages) + 1
        new_passages = list(pool.passages)
        for i in range(poisons_per_query):
            poison_seed = (abs(int(seed)) * 1_000_003 + pool.query_id * 1_009 + i) % (2**31)
            seq, trace = craft_poison(
                pool.query,
                recipe,
                params,
                seed=poison_seed,
                success_threshold=threshold,
                table=table,
            )
            new_passages.append(
                LabeledPassage(
                    passage_id=next_pid + i,
                    seq=seq,
                    label=Label.POISON,
                    attack_succeeded=trace.succeeded,
                )
            )
        attacked.append(
            CorpusQuery(query_id=pool.query_id, query=pool.query, passages=tuple(new_passages))
        )
    return attacked


def poison_rank_check(
    pool: CorpusQuery, params: TinyEncoderParams, k: int, table: np.ndarray | None = None
) -> bool:
    """Whether any poisoned passage enters the undefended base-score Top-K."""
    scores = pooled_scores(pool, params, table)
    ranked = sorted(
        pool.passages, key=lambda p: (-scores[p.passage_id], p.passage_id)
    )
    return any(p.label is Label.POISON for p in ranked[:k])
