"""Probe-gradient stress-test reranking for dense-retrieval poisoning defence.

The library turns randomized-perturbation gradient signatures into two
instability penalties (consistency and dispersion risk), fuses them with a
score gate into a defended ranking, and ships a self-contained testbed:
a tiny hand-differentiated two-tower encoder, a greedy poison generator,
a Bernoulli-gate mechanism simulator with closed-form oracles, and
retrieval-stage poisoning metrics.
"""

from stressrank.signature import (
    GradientSignature,
    PenaltyBreakdown,
    PenaltyConfig,
    PerturbationKind,
    compute_penalties,
)
from stressrank.rerank import (
    CandidatePool,
    DefendedRanking,
    Label,
    RerankConfig,
    ScoredCandidate,
    rerank_pool,
)
from stressrank.harness import ExperimentConfig, run_pipeline, sweep

__all__ = [
    "CandidatePool",
    "DefendedRanking",
    "ExperimentConfig",
    "GradientSignature",
    "Label",
    "PenaltyBreakdown",
    "PenaltyConfig",
    "PerturbationKind",
    "RerankConfig",
    "ScoredCandidate",
    "compute_penalties",
    "rerank_pool",
    "run_pipeline",
    "sweep",
]
