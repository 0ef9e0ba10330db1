"""Statistical core: gradient signatures and the two instability penalties.

A signature is the stack of R probe-gradient vectors collected for one
query--passage pair under randomized perturbations.  From it we derive a
consistency penalty (normalized gradient signal-to-noise ratio, log
transformed) and a dispersion-risk penalty (lower-tail of per-run relative
deviations through an exponential kernel, log transform and saturating cap).
All statistics are symmetric in the run index and computed in double
precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class PerturbationKind(str, Enum):
    TOKEN = "token"
    ENCODER = "encoder"
    MIXED = "mixed"


def nearest_rank_index(level: float, n: int) -> int:
    """1-based nearest-rank index ``ceil(level * n)`` with float-safety slack.

    Returns 0 when the level is so low that the index falls below 1; callers
    decide how to handle that degenerate case.
    """
    if n < 1:
        raise ValueError("nearest_rank_index needs n >= 1")
    # Guard against binary-float artifacts such as 0.1 * 20 = 2.0000000000000004.
    return min(n, math.ceil(level * n - 1e-9))


@dataclass(frozen=True)
class PenaltyConfig:
    """Hyperparameters of the penalty computation.

    epsilon stabilizes denominators and log arguments; alpha is the decay
    rate of the exponential stability kernel; tau the lower-quantile level;
    cap_c the saturation bound of the dispersion-risk penalty.
    """

    epsilon: float = 1e-8
    alpha: float = 4.0
    tau: float = 0.1
    cap_c: float = 6.0
    clamp_nonnegative: bool = True

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not self.cap_c > 0:
            raise ValueError("cap_c must be positive")


@dataclass(frozen=True)
class GradientSignature:
    """R probe-gradient vectors for one query--passage pair."""

    pair_id: tuple[int, int]
    runs: np.ndarray  # shape (R, P)
    perturbation_kind: PerturbationKind = PerturbationKind.MIXED
    probe_layer: int = 1

    def __post_init__(self) -> None:
        runs = np.asarray(self.runs, dtype=np.float64)
        if runs.ndim != 2:
            raise ValueError("runs must be a 2-D array of shape (R, P)")
        if runs.shape[0] < 2:
            raise ValueError("a signature needs at least R=2 runs")
        if runs.shape[1] < 1:
            raise ValueError("probe dimension must be at least 1")
        if not np.all(np.isfinite(runs)):
            raise ValueError("signature contains non-finite entries")
        object.__setattr__(self, "runs", runs)

    @property
    def num_runs(self) -> int:
        return self.runs.shape[0]

    @property
    def probe_dim(self) -> int:
        return self.runs.shape[1]


@dataclass(frozen=True)
class PenaltyBreakdown:
    """Full per-pair trace of the penalty computation."""

    rep: float
    p_rep: float
    stability_scores: np.ndarray
    c_quantile: float
    p_dr_raw: float
    p_dr: float


def rep_consistency(sig: GradientSignature, cfg: PenaltyConfig) -> float:
    """Normalized gradient signal-to-noise ratio across runs, in [0, 1]."""
    runs = sig.runs
    mean_norm = float(np.linalg.norm(runs.mean(axis=0)))
    rms = float(np.sqrt(np.mean(np.sum(runs * runs, axis=1))))
    return mean_norm / (rms + cfg.epsilon)


def rep_penalty(rep: float, cfg: PenaltyConfig) -> float:
    """Consistency penalty: -log(rep + epsilon), optionally clamped at 0."""
    if not 0.0 <= rep <= 1.0 + 1e-12:
        raise ValueError(f"rep must lie in [0, 1], got {rep}")
    value = -math.log(rep + cfg.epsilon)
    if cfg.clamp_nonnegative:
        value = max(0.0, value)
    return value


def run_deviations(sig: GradientSignature, cfg: PenaltyConfig) -> np.ndarray:
    """Per-run relative deviation from the mean gradient.

    When the run mean vanishes the epsilon denominator keeps values finite;
    the resulting huge deviations saturate downstream by design.
    """
    runs = sig.runs
    mean = runs.mean(axis=0)
    num = np.linalg.norm(runs - mean, axis=1)
    return num / (float(np.linalg.norm(mean)) + cfg.epsilon)


def stability_scores(devs: np.ndarray, cfg: PenaltyConfig) -> np.ndarray:
    """Exponential stability kernel exp(-alpha * dev), in (0, 1]."""
    devs = np.asarray(devs, dtype=np.float64)
    if np.any(devs < 0):
        raise ValueError("deviations must be non-negative")
    return np.exp(-cfg.alpha * devs)


def lower_quantile(values: np.ndarray, tau: float) -> float:
    """Nearest-rank lower quantile: sorted value at 1-based index ceil(tau*R)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("lower_quantile of empty input")
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    idx = max(1, nearest_rank_index(tau, values.size))
    return float(np.sort(values)[idx - 1])


def dispersion_penalty(c: float, cfg: PenaltyConfig) -> tuple[float, float]:
    """Raw and saturated dispersion-risk penalty from the quantile stability c.

    Returns (p_dr_raw, p_dr) with p_dr < cap_c always.
    """
    if not 0.0 <= c <= 1.0 + 1e-12:
        raise ValueError(f"c must lie in [0, 1], got {c}")
    raw = -math.log(c + cfg.epsilon) / max(c, cfg.epsilon)
    if cfg.clamp_nonnegative:
        raw = max(0.0, raw)
    sat = cfg.cap_c * raw / (raw + cfg.cap_c + cfg.epsilon)
    return raw, sat


def compute_penalties(sig: GradientSignature, cfg: PenaltyConfig | None = None) -> PenaltyBreakdown:
    """Deterministic composition of the full penalty chain for one signature."""
    if cfg is None:
        cfg = PenaltyConfig()
    rep = rep_consistency(sig, cfg)
    p_rep = rep_penalty(min(rep, 1.0), cfg)
    devs = run_deviations(sig, cfg)
    scores = stability_scores(devs, cfg)
    c = lower_quantile(scores, cfg.tau)
    p_dr_raw, p_dr = dispersion_penalty(c, cfg)
    return PenaltyBreakdown(
        rep=rep,
        p_rep=p_rep,
        stability_scores=scores,
        c_quantile=c,
        p_dr_raw=p_dr_raw,
        p_dr=p_dr,
    )
