"""Acceptance gate: every top-level criterion as one test with a printed
pass/fail line and the stated tolerance and runtime budget.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
report lines.
"""

import filecmp
import math
import time
from dataclasses import replace

import numpy as np

from stressrank.encoder import (
    MARKER_TOKEN,
    PerturbationSpec,
    ProbeSpec,
    TinyEncoderParams,
    TokenSeq,
    finite_diff_gradient,
    probe_gradient,
    realize_perturbation,
)
from stressrank.harness import ExperimentConfig, run_pipeline, sweep
from stressrank.mechanism import MechanismParams, sample_signature
from stressrank.metrics import poison_recall_rate
from stressrank.poison import PoisonRecipe, SyntheticCorpusSpec
from stressrank.rerank import (
    CandidatePool,
    RerankConfig,
    ScoredCandidate,
    defended_score,
    rerank_pool,
)
from stressrank.signature import (
    GradientSignature,
    PenaltyConfig,
    PerturbationKind,
    compute_penalties,
    run_deviations,
)


def _report(name: str, ok: bool, detail: str, budget_s: float, elapsed: float) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}: {detail} ({elapsed:.1f}s / budget {budget_s:.0f}s)")
    assert ok, f"{name}: {detail}"
    assert elapsed < budget_s, f"{name}: runtime {elapsed:.1f}s over budget {budget_s}s"


def test_mechanism_oracle():
    # u=0, noise 0, rho in {0.2, 0.5, 0.8}, R=10,000, 20 seeds:
    # empirical Rep within +-0.02 of sqrt(1-rho).
    t0 = time.perf_counter()
    cfg = PenaltyConfig()
    worst = 0.0
    a = np.zeros(8)
    a[0] = 3.0
    for rho in (0.2, 0.5, 0.8):
        target = math.sqrt(1.0 - rho)
        for seed in range(20):
            mp = MechanismParams(u=np.zeros(8), a=a, rho=rho, num_runs=10_000, seed=seed)
            rep = compute_penalties(sample_signature(mp), cfg).rep
            worst = max(worst, abs(rep - target))
    _report(
        "mechanism oracle (Rep vs sqrt(1-rho), +-0.02)",
        worst <= 0.02,
        f"max |empirical - predicted| = {worst:.4f}",
        10.0,
        time.perf_counter() - t0,
    )


def test_deviation_oracle():
    # rho=0.2, u=0, noise 0: per-run deviations take only the two branch
    # values {1, 0.25}, each within 1e-9.  Uses the simulator's exact-gate
    # mode so the population branch formulas hold at finite R.
    t0 = time.perf_counter()
    a = np.zeros(8)
    a[0] = 100.0
    mp = MechanismParams(u=np.zeros(8), a=a, rho=0.2, num_runs=1000,
                         deterministic_gate=True)
    devs = run_deviations(sample_signature(mp), PenaltyConfig())
    branches = np.array([1.0, 0.25])
    dist = float(np.max(np.min(np.abs(devs[:, None] - branches[None, :]), axis=1)))
    _report(
        "deviation oracle (branch values {1, 0.25}, 1e-9)",
        dist <= 1e-9,
        f"max distance to nearest branch = {dist:.2e}",
        5.0,
        time.perf_counter() - t0,
    )


def test_gradient_correctness():
    # Analytic probe gradient vs central finite differences (h=1e-4, fixed
    # masks), 50 random triples: max relative error <= 1e-4.
    t0 = time.perf_counter()
    params = TinyEncoderParams.initialize(seed=0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(50):
        q = TokenSeq((MARKER_TOKEN,) + tuple(
            int(t) for t in rng.integers(1, params.vocab_size, size=6)))
        p = TokenSeq((MARKER_TOKEN,) + tuple(
            int(t) for t in rng.integers(1, params.vocab_size, size=12)))
        kind = [PerturbationKind.TOKEN, PerturbationKind.ENCODER,
                PerturbationKind.MIXED][trial % 3]
        layer = 1 + trial % params.num_blocks
        spec = PerturbationSpec(kind=kind, master_seed=trial)
        masks = realize_perturbation(spec, params, 0, trial, 0, len(q), len(p))
        probe = ProbeSpec(layer=layer)
        analytic = probe_gradient(q, p, params, probe, masks)
        numeric = finite_diff_gradient(q, p, params, probe, masks, h=1e-4)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        worst = max(worst, float(rel.max()))
    _report(
        "gradient correctness (FD oracle, 1e-4 rel)",
        worst <= 1e-4,
        f"max relative error over 50 triples = {worst:.2e}",
        30.0,
        time.perf_counter() - t0,
    )


def test_penalty_unit_anchors():
    # runs {(2,0),(0,0)} with defaults: (Rep, P_rep, c, P_dr) =
    # (0.7071, 0.3466, 0.018316, 5.8396) within 1e-3 each.
    t0 = time.perf_counter()
    bd = compute_penalties(
        GradientSignature(pair_id=(0, 0), runs=np.array([[2.0, 0.0], [0.0, 0.0]]))
    )
    got = (bd.rep, bd.p_rep, bd.c_quantile, bd.p_dr)
    want = (0.7071, 0.3466, 0.018316, 5.8396)
    errs = [abs(g - w) for g, w in zip(got, want)]
    _report(
        "penalty unit anchors (1e-3)",
        max(errs) <= 1e-3,
        f"(Rep, P_rep, c, P_dr) = ({got[0]:.4f}, {got[1]:.4f}, {got[2]:.6f}, {got[3]:.4f})",
        1.0,
        time.perf_counter() - t0,
    )


def test_directional_defence_effect():
    # Default corpus (100 queries x 50 clean x 5 poisons), greedy attack,
    # mixed perturbation, R=20: defended PRR@5 < undefended on >= 80% of 10
    # seeds, and mean defended <= 0.5 * mean undefended.
    t0 = time.perf_counter()
    defended, undefended = [], []
    for seed in range(10):
        cfg = ExperimentConfig(seed=seed, k_values=(5,))
        pipeline = run_pipeline(cfg)
        labels = pipeline.labels_map()
        rankings = pipeline.eval_rankings("full")
        undefended.append(poison_recall_rate(rankings, labels, 5, defended=False))
        defended.append(poison_recall_rate(rankings, labels, 5, defended=True))
    wins = sum(d < u for d, u in zip(defended, undefended))
    mean_d, mean_u = float(np.mean(defended)), float(np.mean(undefended))
    ok = wins >= 8 and mean_d <= 0.5 * mean_u
    _report(
        "directional defence effect (PRR@5, 10 seeds)",
        ok,
        f"wins {wins}/10, mean defended {mean_d:.3f} vs undefended {mean_u:.3f}",
        600.0,
        time.perf_counter() - t0,
    )


def test_zero_penalty_and_gate_focus_properties():
    # 1,000 random pools each: zero-penalty identity; gate-focus bound
    # |s~ - s| <= sigma(-10) * (C + 18.42) < 1.2e-3 far below the center.
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = RerankConfig(k=5)
    identity_ok = True
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        pool = CandidatePool(
            query_id=0,
            candidates=tuple(
                ScoredCandidate(passage_id=i, base_score=float(rng.uniform(-1, 1)))
                for i in range(n)
            ),
        )
        ranking = rerank_pool(pool, cfg)
        identity_ok &= ranking.defended_order() == ranking.base_order()

    from stressrank.signature import PenaltyBreakdown

    bound = (1 / (1 + math.exp(10.0))) * (6.0 + 18.42)
    focus_ok = bound < 1.2e-3
    for _ in range(1000):
        mu = float(rng.uniform(-1, 1))
        s = mu - 10.0 - float(rng.uniform(0, 3))
        pb = PenaltyBreakdown(
            rep=0.5, p_rep=float(rng.uniform(0, 18.42 - 6)),
            stability_scores=np.array([1.0]), c_quantile=0.5,
            p_dr_raw=1.0, p_dr=float(rng.uniform(0, 6)),
        )
        cand = ScoredCandidate(passage_id=0, base_score=s, penalties=pb)
        focus_ok &= abs(defended_score(cand, mu, cfg) - s) <= bound
    _report(
        "zero-penalty identity + gate focus (1000 pools each)",
        identity_ok and focus_ok,
        f"identity ok={identity_ok}, focus bound {bound:.2e} held={focus_ok}",
        60.0,
        time.perf_counter() - t0,
    )


def test_metric_oracle():
    # PHR/PRR/rank-shift vs exhaustive brute force on 200 random pools of
    # size <= 10, exact agreement.
    t0 = time.perf_counter()
    from stressrank.metrics import poison_hit_rate, rank_shift_stats
    from stressrank.rerank import CandidateRecord, DefendedRanking, Label

    rng = np.random.default_rng(0)
    ok = True
    for _ in range(200):
        n = int(rng.integers(1, 11))
        ids = list(range(n))
        base = [int(p) for p in rng.permutation(ids)]
        defended_order = [int(p) for p in rng.permutation(ids)]
        lab = {p: (Label.POISON if rng.random() < 0.3 else Label.CLEAN) for p in ids}
        b_rank = {p: i + 1 for i, p in enumerate(base)}
        d_rank = {p: i + 1 for i, p in enumerate(defended_order)}
        records = tuple(
            CandidateRecord(
                passage_id=p, base_score=-b_rank[p], gate_weight=0.5,
                penalty_sum=0.0, defended_score=-d_rank[p],
                base_rank=b_rank[p], defended_rank=d_rank[p], label=lab[p],
            )
            for p in ids
        )
        ranking = DefendedRanking(query_id=0, records=records,
                                  top_k_ids=tuple(defended_order[:5]))
        labels = {0: lab}
        for k in (1, 3, 5):
            hit = any(lab[p] is Label.POISON for p in defended_order[:k])
            poisons = [p for p in ids if lab[p] is Label.POISON]
            got = sum(1 for p in defended_order[:k] if p in poisons)
            prr = got / (len(poisons) + 1e-8)
            ok &= poison_hit_rate([ranking], labels, k) == float(hit)
            ok &= poison_recall_rate([ranking], labels, k) == prr
        shifts = rank_shift_stats([ranking], labels)
        up = [b_rank[p] - d_rank[p] for p in ids
              if lab[p] is Label.POISON and b_rank[p] > d_rank[p]]
        ok &= shifts.poison_up.count == len(up)
        ok &= shifts.poison_up.max_shift == (max(up) if up else 0.0)
    _report(
        "metric oracle (200 random pools, exact)",
        ok,
        "PHR/PRR/rank-shift equal brute-force recomputation",
        10.0,
        time.perf_counter() - t0,
    )


def test_r_sweep_stability():
    # Defended PRR@5 across R in {4, 8, 16, 20, 32} on a fixed corpus varies
    # by <= 0.15 absolute between R=16 and R=32.
    t0 = time.perf_counter()
    cfg = ExperimentConfig(seed=0, k_values=(5,))
    rows = sweep(cfg, r_values=(4, 8, 16, 20, 32), l_values=(1,),
                 kinds=(PerturbationKind.MIXED,), encoder_seeds=(0,))
    prr = {row["num_runs"]: row["prr_defended"] for row in rows if row["k"] == 5}
    delta = abs(prr[16] - prr[32])
    _report(
        "R-sweep stability (|PRR@5(16) - PRR@5(32)| <= 0.15)",
        delta <= 0.15,
        f"PRR@5 by R: { {r: round(v, 3) for r, v in sorted(prr.items())} }, delta {delta:.3f}",
        1800.0,
        time.perf_counter() - t0,
    )


def test_pipeline_determinism(tmp_path):
    # Two full pipeline runs with the same seed produce byte-identical
    # artifacts.
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        seed=7,
        corpus=SyntheticCorpusSpec(num_queries=20, seed=7),
        recipe=PoisonRecipe(),
        k_values=(5, 10, 20, 30, 40, 50),
    )
    run_pipeline(cfg, out_dir=tmp_path / "a")
    run_pipeline(cfg, out_dir=tmp_path / "b")
    names = ["config.yaml", "metrics.csv", "rank_shift.csv",
             "penalty_distributions.csv", "traces.jsonl", "split.json"]
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "a", tmp_path / "b", names, shallow=False
    )
    ok = mismatch == [] and errors == [] and sorted(match) == sorted(names)
    _report(
        "pipeline determinism (byte-identical artifacts)",
        ok,
        f"{len(match)} artifacts identical" + (f", mismatch {mismatch}" if mismatch else ""),
        300.0,
        time.perf_counter() - t0,
    )
