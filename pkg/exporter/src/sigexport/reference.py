"""Reference computation of the stability statistics from a run matrix.

A deliberately small, standalone transcription of the penalty math used
by the reranking core, kept here so an export can be sanity-checked
without installing the core: consistency ratio, its log penalty, per-run
deviations, the lower-tail stability quantile, and the saturated
dispersion penalty.  The core's values on an imported dump must agree
with these to high precision — that cross-check is the exporter's main
correctness oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPSILON = 1e-8
ALPHA = 4.0
TAU = 0.1
CAP = 6.0


@dataclass(frozen=True)
class ReferenceStats:
    rep: float
    p_rep: float
    c_quantile: float
    p_dr: float


def _nearest_rank(level: float, n: int) -> int:
    return min(n, max(1, math.ceil(level * n - 1e-9)))


def reference_stats(runs: np.ndarray) -> ReferenceStats:
    """Stability statistics for one (R, P) run matrix, float64 throughout."""
    runs = np.asarray(runs, dtype=np.float64)
    mean = runs.mean(axis=0)
    rep = float(np.linalg.norm(mean) / (np.sqrt((runs * runs).sum(axis=1).mean()) + EPSILON))
    p_rep = max(0.0, -math.log(min(rep, 1.0) + EPSILON))

    mean_norm = float(np.linalg.norm(mean))
    dev = np.linalg.norm(runs - mean, axis=1) / (mean_norm + EPSILON)
    stability = np.exp(-ALPHA * dev)
    c = float(np.sort(stability)[_nearest_rank(TAU, len(stability)) - 1])
    p_raw = -math.log(c + EPSILON) / max(c, EPSILON)
    p_raw = max(0.0, p_raw)
    p_dr = CAP * p_raw / (p_raw + CAP + EPSILON)
    return ReferenceStats(rep=rep, p_rep=p_rep, c_quantile=c, p_dr=p_dr)
