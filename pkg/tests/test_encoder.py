"""Encoder tests: normalization contract, determinism, an independent
straight-line forward re-implementation, finite-difference gradient checks,
and the token-dropout guarantees."""

import math
import tempfile
from pathlib import Path

import numpy as np
import pytest

from stressrank.encoder import (
    MARKER_TOKEN,
    PerturbationSpec,
    ProbeSpec,
    TinyEncoderParams,
    TokenSeq,
    base_score,
    encode,
    finite_diff_gradient,
    load_params,
    probe_gradient,
    realize_perturbation,
    save_params,
    signature_for_pair,
    token_feature_table,
)
from stressrank.signature import PenaltyConfig, PerturbationKind, compute_penalties


@pytest.fixture(scope="module")
def params():
    return TinyEncoderParams.initialize(seed=0)


def _random_seq(rng, params, length):
    toks = (MARKER_TOKEN,) + tuple(
        int(t) for t in rng.integers(1, params.vocab_size, size=length - 1)
    )
    return TokenSeq(toks)


def straight_line_encode(seq, params):
    """Independent re-implementation of the unperturbed forward pass.

    Pure-python loops over positions and blocks; shares no code with the
    library path.
    """
    d = params.embed_dim
    positions = []
    for tok in seq.tokens:
        h = [float(params.embedding[tok, j]) for j in range(d)]
        for blk in range(params.num_blocks):
            z = [
                sum(params.dense_w[blk, i, j] * h[j] for j in range(d))
                + params.dense_b[blk, i]
                for i in range(d)
            ]
            a = [math.tanh(x) for x in z]
            mu = sum(a) / d
            var = sum((x - mu) ** 2 for x in a) / d
            inv = 1.0 / math.sqrt(var + params.layernorm_delta)
            h = [
                params.ln_gain[blk, i] * (a[i] - mu) * inv + params.ln_bias[blk, i]
                for i in range(d)
            ]
        positions.append(h)
    pooled = [sum(p[i] for p in positions) / len(positions) for i in range(d)]
    norm = math.sqrt(sum(x * x for x in pooled))
    return [x / norm for x in pooled]


def test_output_is_unit_norm(params):
    rng = np.random.default_rng(0)
    for _ in range(20):
        seq = _random_seq(rng, params, int(rng.integers(2, 40)))
        out = encode(seq, params)
        assert abs(np.linalg.norm(out) - 1.0) <= 1e-12


def test_encode_deterministic(params):
    seq = TokenSeq((0, 5, 9, 200))
    a = encode(seq, params)
    b = encode(seq, params)
    assert np.array_equal(a, b)


def test_encode_seeded_dropout_deterministic(params):
    spec = PerturbationSpec(kind=PerturbationKind.ENCODER, master_seed=3)
    seq = TokenSeq((0, 5, 9, 200))
    m1 = realize_perturbation(spec, params, 1, 2, 0, 4, 4)
    m2 = realize_perturbation(spec, params, 1, 2, 0, 4, 4)
    assert np.array_equal(
        encode(seq, params, m1, tower="passage"), encode(seq, params, m2, tower="passage")
    )


def test_self_similarity(params):
    seq = TokenSeq((0, 3, 17, 44, 101))
    assert base_score(seq, seq, params) == pytest.approx(1.0, abs=1e-10)


def test_score_bounded(params):
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = _random_seq(rng, params, 8)
        p = _random_seq(rng, params, 25)
        assert abs(base_score(q, p, params)) <= 1.0 + 1e-10


def test_matches_straight_line_reimplementation(params):
    rng = np.random.default_rng(2)
    q = _random_seq(rng, params, 6)
    p = _random_seq(rng, params, 9)
    ref_q = np.array(straight_line_encode(q, params))
    ref_p = np.array(straight_line_encode(p, params))
    assert np.allclose(encode(q, params), ref_q, rtol=1e-12, atol=1e-12)
    assert base_score(q, p, params) == pytest.approx(float(ref_q @ ref_p), abs=1e-12)


def test_token_out_of_range_rejected(params):
    with pytest.raises(ValueError):
        encode(TokenSeq((0, params.vocab_size)), params)


def test_short_sequences_rejected():
    with pytest.raises(ValueError):
        TokenSeq((0,))
    with pytest.raises(ValueError):
        TokenSeq(tuple(range(100)))


@pytest.mark.parametrize("layer", [1, 2, 3, 4])
@pytest.mark.parametrize("kind", list(PerturbationKind))
def test_gradient_matches_finite_differences(params, layer, kind):
    rng = np.random.default_rng(layer * 10 + 1)
    q = _random_seq(rng, params, 7)
    p = _random_seq(rng, params, 12)
    spec = PerturbationSpec(kind=kind, master_seed=layer)
    masks = realize_perturbation(spec, params, 0, 0, 0, len(q), len(p))
    probe = ProbeSpec(layer=layer)
    analytic = probe_gradient(q, p, params, probe, masks)
    numeric = finite_diff_gradient(q, p, params, probe, masks, h=1e-4)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4


def test_gradient_probe_param_subsets(params):
    rng = np.random.default_rng(5)
    q = _random_seq(rng, params, 5)
    p = _random_seq(rng, params, 8)
    full = probe_gradient(q, p, params, ProbeSpec(layer=2, probe_params="both"))
    gain = probe_gradient(q, p, params, ProbeSpec(layer=2, probe_params="gain"))
    bias = probe_gradient(q, p, params, ProbeSpec(layer=2, probe_params="bias"))
    assert np.array_equal(full, np.concatenate([gain, bias]))


def test_token_dropout_preserves_marker_and_content(params):
    spec = PerturbationSpec(kind=PerturbationKind.TOKEN, token_drop_p=0.9, master_seed=0)
    for run in range(200):
        masks = realize_perturbation(spec, params, 0, 0, run, 5, 12)
        assert masks.passage_active[0] == 1.0  # marker always kept
        assert masks.passage_active[1:].sum() >= 1.0  # >= 1 content token


def test_token_dropout_two_token_passage(params):
    # Marker + single content token: the content token can never drop.
    spec = PerturbationSpec(kind=PerturbationKind.TOKEN, token_drop_p=0.99, master_seed=1)
    seq = TokenSeq((0, 7))
    sig = signature_for_pair(
        TokenSeq((0, 3, 4)), seq, params, ProbeSpec(), spec, num_runs=8
    )
    assert sig.runs.shape == (8, 2 * params.embed_dim)


def test_zero_perturbation_collapses_signature(params):
    spec = PerturbationSpec(
        kind=PerturbationKind.MIXED, token_drop_p=0.0, encoder_drop_p=0.0, master_seed=0
    )
    rng = np.random.default_rng(6)
    q = _random_seq(rng, params, 6)
    p = _random_seq(rng, params, 10)
    sig = signature_for_pair(q, p, params, ProbeSpec(), spec, num_runs=6)
    assert np.all(sig.runs == sig.runs[0])
    bd = compute_penalties(sig, PenaltyConfig())
    assert bd.rep == pytest.approx(1.0, abs=1e-6)
    assert bd.p_dr == 0.0


def test_signature_deterministic(params):
    spec = PerturbationSpec(kind=PerturbationKind.MIXED, master_seed=42)
    rng = np.random.default_rng(7)
    q = _random_seq(rng, params, 6)
    p = _random_seq(rng, params, 10)
    s1 = signature_for_pair(q, p, params, ProbeSpec(), spec, num_runs=5,
                            query_id=3, passage_id=9)
    s2 = signature_for_pair(q, p, params, ProbeSpec(), spec, num_runs=5,
                            query_id=3, passage_id=9)
    assert np.array_equal(s1.runs, s2.runs)
    s3 = signature_for_pair(q, p, params, ProbeSpec(), spec, num_runs=5,
                            query_id=3, passage_id=10)
    assert not np.array_equal(s1.runs, s3.runs)


def test_params_save_load_roundtrip(params):
    with tempfile.TemporaryDirectory() as td:
        path = Path(td) / "params.npz"
        save_params(params, path)
        loaded = load_params(path)
    assert np.array_equal(params.embedding, loaded.embedding)
    assert np.array_equal(params.dense_w, loaded.dense_w)
    assert params.layernorm_delta == loaded.layernorm_delta
    assert params.seed == loaded.seed


def test_feature_table_matches_encode(params):
    # Positions never mix, so pooled encodings are means of table rows.
    table = token_feature_table(params)
    seq = TokenSeq((0, 4, 9, 77, 300))
    pooled = table[np.asarray(seq.tokens)].mean(axis=0)
    assert np.allclose(pooled / np.linalg.norm(pooled), encode(seq, params), atol=1e-12)


def test_probe_layer_out_of_range(params):
    with pytest.raises(ValueError):
        probe_gradient(
            TokenSeq((0, 1)), TokenSeq((0, 2)), params, ProbeSpec(layer=5)
        )
