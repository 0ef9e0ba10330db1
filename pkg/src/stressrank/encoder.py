"""Tiny shared two-tower encoder with hand-derived probe gradients.

Architecture per token position (positions never mix before pooling):
embedding -> B x {dense, tanh, optional inverted dropout, LayerNorm} ->
mean-pool over active positions -> l2 normalization.  The base score is the
dot product of the two unit encodings; the probe gradient is the analytic
gradient of that score with respect to the gain and bias of the LayerNorm
at one chosen block, accumulated through both towers of the shared encoder
with all stochastic masks held fixed.

All randomness is derived from (master_seed, query_id, passage_id, run), so
every encoding, perturbation and gradient is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from stressrank.signature import GradientSignature, PerturbationKind

MAX_SEQ_LEN = 64
MARKER_TOKEN = 0

PARAMS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TokenSeq:
    """Token id sequence; position 0 holds the CLS-like marker token."""

    tokens: tuple[int, ...]
    max_len: int = MAX_SEQ_LEN

    def __post_init__(self) -> None:
        toks = tuple(int(t) for t in self.tokens)
        if len(toks) < 2:
            raise ValueError("a sequence needs the marker plus at least one content token")
        if len(toks) > self.max_len:
            raise ValueError(f"sequence length {len(toks)} exceeds max {self.max_len}")
        object.__setattr__(self, "tokens", toks)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TinyEncoderParams:
    """Fixed (never trained) weights of the shared two-tower encoder."""

    embedding: np.ndarray  # (V, d)
    dense_w: np.ndarray  # (B, d, d)
    dense_b: np.ndarray  # (B, d)
    ln_gain: np.ndarray  # (B, d)
    ln_bias: np.ndarray  # (B, d)
    layernorm_delta: float = 1e-5
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.dense_w.shape[0]

    def __post_init__(self) -> None:
        for name in ("embedding", "dense_w", "dense_b", "ln_gain", "ln_bias"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            object.__setattr__(self, name, arr)
        if not self.layernorm_delta > 0:
            raise ValueError("layernorm_delta must be positive")

    @classmethod
    def initialize(
        cls,
        vocab_size: int = 512,
        embed_dim: int = 32,
        num_blocks: int = 4,
        layernorm_delta: float = 1e-5,
        seed: int = 0,
    ) -> "TinyEncoderParams":
        rng = np.random.default_rng(np.random.SeedSequence([0x5E_ED, seed]))
        scale = 1.0 / np.sqrt(embed_dim)
        embedding = rng.standard_normal((vocab_size, embed_dim)) * scale
        dense_w = rng.standard_normal((num_blocks, embed_dim, embed_dim)) * scale
        dense_b = np.zeros((num_blocks, embed_dim))
        ln_gain = np.ones((num_blocks, embed_dim))
        ln_bias = np.zeros((num_blocks, embed_dim))
        return cls(
            embedding=embedding,
            dense_w=dense_w,
            dense_b=dense_b,
            ln_gain=ln_gain,
            ln_bias=ln_bias,
            layernorm_delta=layernorm_delta,
            seed=seed,
        )


def save_params(params: TinyEncoderParams, path: str | Path) -> None:
    """Bit-exact versioned binary save (npz container)."""
    np.savez(
        Path(path),
        format_version=np.int64(PARAMS_FORMAT_VERSION),
        embedding=params.embedding,
        dense_w=params.dense_w,
        dense_b=params.dense_b,
        ln_gain=params.ln_gain,
        ln_bias=params.ln_bias,
        layernorm_delta=np.float64(params.layernorm_delta),
        seed=np.int64(params.seed),
    )


def load_params(path: str | Path) -> TinyEncoderParams:
    with np.load(Path(path)) as data:
        version = int(data["format_version"])
        if version != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported params format version {version}")
        return TinyEncoderParams(
            embedding=data["embedding"],
            dense_w=data["dense_w"],
            dense_b=data["dense_b"],
            ln_gain=data["ln_gain"],
            ln_bias=data["ln_bias"],
            layernorm_delta=float(data["layernorm_delta"]),
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class PerturbationSpec:
    """What kind of randomized perturbation is applied per probing run."""

    kind: PerturbationKind = PerturbationKind.MIXED
    token_drop_p: float = 0.10
    encoder_drop_p: float = 0.10
    master_seed: int = 0

    def __post_init__(self) -> None:
        for p in (self.token_drop_p, self.encoder_drop_p):
            if not 0 <= p < 1:
                raise ValueError("dropout probabilities must lie in [0, 1)")

    @property
    def token_dropout_active(self) -> bool:
        return self.kind in (PerturbationKind.TOKEN, PerturbationKind.MIXED)

    @property
    def encoder_dropout_active(self) -> bool:
        return self.kind in (PerturbationKind.ENCODER, PerturbationKind.MIXED)


@dataclass(frozen=True)
class ProbeSpec:
    """Which LayerNorm block is probed; probe dimension is 2d (gain then bias)."""

    layer: int = 1
    probe_params: str = "both"  # "both" | "gain" | "bias"

    def __post_init__(self) -> None:
        if self.layer < 1:
            raise ValueError("probe layer is 1-based and must be >= 1")
        if self.probe_params not in ("both", "gain", "bias"):
            raise ValueError("probe_params must be 'both', 'gain' or 'bias'")

    def dim(self, embed_dim: int) -> int:
        return 2 * embed_dim if self.probe_params == "both" else embed_dim


@dataclass(frozen=True)
class PerturbationMasks:
    """One realized perturbation draw: fixed for forward, gradient and oracle.

    passage_active marks which passage positions survive token dropout; the
    per-block dropout masks already include the inverted-dropout scale
    1/(1-p) (all-ones arrays when encoder dropout is off).
    """

    passage_active: np.ndarray  # (Tp,) float 0/1
    query_drop: np.ndarray | None  # (B, Tq, d) scaled masks or None
    passage_drop: np.ndarray | None  # (B, Tp, d)


def realize_perturbation(
    spec: PerturbationSpec,
    params: TinyEncoderParams,
    query_id: int,
    passage_id: int,
    run_index: int,
    query_len: int,
    passage_len: int,
) -> PerturbationMasks:
    """Draw the fixed stochastic masks for one probing run.

    Token dropout applies to the passage only, never removes the marker slot,
    and always keeps at least one content token active.  Encoder dropout uses
    independent masks for the two towers.
    """
    ss = np.random.SeedSequence([abs(int(spec.master_seed)), abs(int(query_id)),
                                 abs(int(passage_id)), int(run_index)])
    rng = np.random.default_rng(ss)
    b, d = params.num_blocks, params.embed_dim

    active = np.ones(passage_len, dtype=np.float64)
    if spec.token_dropout_active and spec.token_drop_p > 0:
        keep = rng.random(passage_len - 1) >= spec.token_drop_p
        if not keep.any():
            keep[rng.integers(0, passage_len - 1)] = True
        active[1:] = keep.astype(np.float64)

    query_drop = passage_drop = None
    if spec.encoder_dropout_active and spec.encoder_drop_p > 0:
        p = spec.encoder_drop_p
        scale = 1.0 / (1.0 - p)
        query_drop = (rng.random((b, query_len, d)) >= p).astype(np.float64) * scale
        passage_drop = (rng.random((b, passage_len, d)) >= p).astype(np.float64) * scale
    return PerturbationMasks(passage_active=active, query_drop=query_drop,
                             passage_drop=passage_drop)


class _ForwardCache:
    """Per-tower forward activations needed for the probe backward pass."""

    __slots__ = ("tanh_out", "x_hat", "inv_std", "drop", "active", "n_active",
                 "pool", "pool_norm", "out")

    def __init__(self) -> None:
        self.tanh_out: list[np.ndarray] = []
        self.x_hat: list[np.ndarray] = []
        self.inv_std: list[np.ndarray] = []
        self.drop: list[np.ndarray | None] = []


def _forward_tower(
    tokens: tuple[int, ...],
    params: TinyEncoderParams,
    active: np.ndarray | None,
    drop_masks: np.ndarray | None,
) -> _ForwardCache:
    """Run the block stack on one sequence; batched shapes are (R, T, d).

    ``active`` is (R, T) or None (all active); ``drop_masks`` is (R, B, T, d)
    or None.  A singleton run axis is used for deterministic single calls.
    """
    token_arr = np.asarray(tokens, dtype=np.int64)
    if token_arr.min() < 0 or token_arr.max() >= params.vocab_size:
        raise ValueError("token id out of vocabulary range")
    h = params.embedding[token_arr]  # (T, d)
    runs = 1
    if drop_masks is not None:
        runs = drop_masks.shape[0]
    elif active is not None:
        runs = active.shape[0]
    h = np.broadcast_to(h, (runs,) + h.shape).copy()

    cache = _ForwardCache()
    for blk in range(params.num_blocks):
        z = h @ params.dense_w[blk].T + params.dense_b[blk]
        a = np.tanh(z)
        cache.tanh_out.append(a)
        if drop_masks is not None:
            mask = drop_masks[:, blk]
            a = a * mask
            cache.drop.append(mask)
        else:
            cache.drop.append(None)
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + params.layernorm_delta)
        x_hat = (a - mu) * inv_std
        cache.x_hat.append(x_hat)
        cache.inv_std.append(inv_std)
        h = params.ln_gain[blk] * x_hat + params.ln_bias[blk]

    if active is None:
        active = np.ones((runs, len(tokens)), dtype=np.float64)
    cache.active = active
    cache.n_active = active.sum(axis=-1)  # (R,)
    pool = (h * active[..., None]).sum(axis=1) / cache.n_active[:, None]
    cache.pool = pool
    cache.pool_norm = np.linalg.norm(pool, axis=-1)
    if np.any(cache.pool_norm == 0) or not np.all(np.isfinite(pool)):
        raise FloatingPointError("degenerate pooled representation")
    cache.out = pool / cache.pool_norm[:, None]
    return cache


def _probe_backward(
    cache: _ForwardCache,
    params: TinyEncoderParams,
    d_out: np.ndarray,
    probe_block: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of (d_out . out) w.r.t. (gain, bias) of the probed block.

    d_out has shape (R, d); returns two (R, d) arrays.
    """
    out, pool_norm = cache.out, cache.pool_norm
    d_pool = (d_out - out * np.sum(out * d_out, axis=-1, keepdims=True)) / pool_norm[:, None]
    d_h = cache.active[..., None] * d_pool[:, None, :] / cache.n_active[:, None, None]

    for blk in range(params.num_blocks - 1, probe_block - 1, -1):
        if blk == probe_block:
            d_gain = (d_h * cache.x_hat[blk]).sum(axis=1)
            d_bias = d_h.sum(axis=1)
            return d_gain, d_bias
        x_hat = cache.x_hat[blk]
        d_xhat = d_h * params.ln_gain[blk]
        d_a = cache.inv_std[blk] * (
            d_xhat
            - d_xhat.mean(axis=-1, keepdims=True)
            - x_hat * (d_xhat * x_hat).mean(axis=-1, keepdims=True)
        )
        if cache.drop[blk] is not None:
            d_a = d_a * cache.drop[blk]
        tanh_out = cache.tanh_out[blk]
        d_z = d_a * (1.0 - tanh_out * tanh_out)
        d_h = d_z @ params.dense_w[blk]
    raise AssertionError("probe block not reached")  # pragma: no cover


def encode(
    seq: TokenSeq,
    params: TinyEncoderParams,
    masks: PerturbationMasks | None = None,
    tower: str = "query",
) -> np.ndarray:
    """Unit-norm encoding of one sequence, optionally under fixed masks."""
    active = drop = None
    if masks is not None:
        if tower == "passage":
            active = masks.passage_active[None, :]
            if masks.passage_drop is not None:
                drop = masks.passage_drop[None]
        else:
            if masks.query_drop is not None:
                drop = masks.query_drop[None]
    cache = _forward_tower(seq.tokens, params, active, drop)
    return cache.out[0]


def base_score(q: TokenSeq, p: TokenSeq, params: TinyEncoderParams) -> float:
    """Unperturbed similarity: dot product of the two unit encodings."""
    return float(encode(q, params) @ encode(p, params))


def _pair_score_and_grad(
    q: TokenSeq,
    p: TokenSeq,
    params: TinyEncoderParams,
    probe: ProbeSpec,
    active: np.ndarray | None,
    q_drop: np.ndarray | None,
    p_drop: np.ndarray | None,
    want_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Batched perturbed scores and probe gradients; run axis first."""
    if probe.layer > params.num_blocks:
        raise ValueError(f"probe layer {probe.layer} exceeds {params.num_blocks} blocks")
    blk = probe.layer - 1
    q_cache = _forward_tower(q.tokens, params, None, q_drop)
    p_cache = _forward_tower(p.tokens, params, active, p_drop)
    runs = max(q_cache.out.shape[0], p_cache.out.shape[0])
    out_q = np.broadcast_to(q_cache.out, (runs, params.embed_dim))
    out_p = np.broadcast_to(p_cache.out, (runs, params.embed_dim))
    scores = np.sum(out_q * out_p, axis=-1)
    if not want_grad:
        return scores, None

    # Backward is linear in the upstream vector, so a singleton-run cache
    # broadcasts cleanly against per-run upstreams from the other tower.
    gq_gain, gq_bias = _probe_backward(q_cache, params, np.ascontiguousarray(out_p), blk)
    gp_gain, gp_bias = _probe_backward(p_cache, params, np.ascontiguousarray(out_q), blk)
    gain = np.broadcast_to(gq_gain, (runs, params.embed_dim)) + np.broadcast_to(gp_gain, (runs, params.embed_dim))
    bias = np.broadcast_to(gq_bias, (runs, params.embed_dim)) + np.broadcast_to(gp_bias, (runs, params.embed_dim))
    if probe.probe_params == "gain":
        grads = gain
    elif probe.probe_params == "bias":
        grads = bias
    else:
        grads = np.concatenate([gain, bias], axis=-1)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite probe gradient")
    return scores, grads


def probe_gradient(
    q: TokenSeq,
    p: TokenSeq,
    params: TinyEncoderParams,
    probe: ProbeSpec,
    masks: PerturbationMasks | None = None,
) -> np.ndarray:
    """Analytic gradient of the perturbed score w.r.t. the probed LayerNorm.

    Contributions flow through both towers of the shared encoder; the
    stochastic masks are held fixed, so this is the gradient of the realized
    stochastic forward.
    """
    active = q_drop = p_drop = None
    if masks is not None:
        active = masks.passage_active[None, :]
        q_drop = None if masks.query_drop is None else masks.query_drop[None]
        p_drop = None if masks.passage_drop is None else masks.passage_drop[None]
    _, grads = _pair_score_and_grad(q, p, params, probe, active, q_drop, p_drop)
    return grads[0]


def perturbed_score(
    q: TokenSeq,
    p: TokenSeq,
    params: TinyEncoderParams,
    masks: PerturbationMasks | None = None,
) -> float:
    """Similarity under one fixed perturbation realization."""
    active = q_drop = p_drop = None
    if masks is not None:
        active = masks.passage_active[None, :]
        q_drop = None if masks.query_drop is None else masks.query_drop[None]
        p_drop = None if masks.passage_drop is None else masks.passage_drop[None]
    scores, _ = _pair_score_and_grad(q, p, params, ProbeSpec(), active, q_drop, p_drop,
                                     want_grad=False)
    return float(scores[0])


def finite_diff_gradient(
    q: TokenSeq,
    p: TokenSeq,
    params: TinyEncoderParams,
    probe: ProbeSpec,
    masks: PerturbationMasks | None = None,
    h: float = 1e-4,
) -> np.ndarray:
    """Central-difference oracle over the probe coordinates, same fixed masks."""
    if not h > 0:
        raise ValueError("step size must be positive")
    blk = probe.layer - 1
    d = params.embed_dim
    dim = probe.dim(d)
    grad = np.empty(dim)

    def score_with(gain: np.ndarray, bias: np.ndarray) -> float:
        ln_gain = params.ln_gain.copy()
        ln_bias = params.ln_bias.copy()
        ln_gain[blk] = gain
        ln_bias[blk] = bias
        shifted = replace(params, ln_gain=ln_gain, ln_bias=ln_bias)
        return perturbed_score(q, p, shifted, masks)

    coords: list[tuple[str, int]] = []
    if probe.probe_params in ("both", "gain"):
        coords += [("gain", i) for i in range(d)]
    if probe.probe_params in ("both", "bias"):
        coords += [("bias", i) for i in range(d)]
    for j, (which, i) in enumerate(coords):
        gain_hi, bias_hi = params.ln_gain[blk].copy(), params.ln_bias[blk].copy()
        gain_lo, bias_lo = params.ln_gain[blk].copy(), params.ln_bias[blk].copy()
        if which == "gain":
            gain_hi[i] += h
            gain_lo[i] -= h
        else:
            bias_hi[i] += h
            bias_lo[i] -= h
        grad[j] = (score_with(gain_hi, bias_hi) - score_with(gain_lo, bias_lo)) / (2 * h)
    return grad


def signature_for_pair(
    q: TokenSeq,
    p: TokenSeq,
    params: TinyEncoderParams,
    probe: ProbeSpec,
    perturbation: PerturbationSpec,
    num_runs: int = 20,
    query_id: int = 0,
    passage_id: int = 0,
) -> GradientSignature:
    """R probe gradients under independently seeded perturbations of one pair."""
    if num_runs < 2:
        raise ValueError("a signature needs at least 2 runs")
    b, d = params.num_blocks, params.embed_dim
    tq, tp = len(q), len(p)
    active = np.ones((num_runs, tp))
    q_drop = p_drop = None
    if perturbation.encoder_dropout_active and perturbation.encoder_drop_p > 0:
        q_drop = np.empty((num_runs, b, tq, d))
        p_drop = np.empty((num_runs, b, tp, d))
    for r in range(num_runs):
        masks = realize_perturbation(perturbation, params, query_id, passage_id, r, tq, tp)
        active[r] = masks.passage_active
        if q_drop is not None:
            q_drop[r] = masks.query_drop
            p_drop[r] = masks.passage_drop
    _, grads = _pair_score_and_grad(q, p, params, probe, active, q_drop, p_drop)
    return GradientSignature(
        pair_id=(query_id, passage_id),
        runs=grads,
        perturbation_kind=perturbation.kind,
        probe_layer=probe.layer,
    )


def token_feature_table(params: TinyEncoderParams) -> np.ndarray:
    """Per-token output of the unperturbed block stack, shape (V, d).

    Because positions never interact before pooling, any unperturbed pooled
    encoding is the mean of these rows over the sequence's tokens.
    """
    h = params.embedding[np.arange(params.vocab_size)][None]
    for blk in range(params.num_blocks):
        z = h @ params.dense_w[blk].T + params.dense_b[blk]
        a = np.tanh(z)
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        x_hat = (a - mu) / np.sqrt(var + params.layernorm_delta)
        h = params.ln_gain[blk] * x_hat + params.ln_bias[blk]
    return h[0]
