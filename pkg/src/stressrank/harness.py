"""Experiment orchestration: configuration, pipeline, bounded mode, sweeps.

The pipeline runs generate -> attack -> probe -> rerank -> measure and emits
deterministic artifacts (metrics CSV with undefended and ablation-variant
rows per K, rank-shift stats, penalty distributions, per-query traces).
All randomness is pre-derived per (seed, query, passage, run), so the result
is a pure function of the configuration regardless of execution order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from stressrank import io as srio
from stressrank.encoder import (
    PerturbationSpec,
    ProbeSpec,
    TinyEncoderParams,
    signature_for_pair,
)
from stressrank.metrics import (
    penalty_distributions,
    poison_hit_rate,
    poison_recall_rate,
    rank_shift_stats,
)
from stressrank.poison import (
    CorpusQuery,
    PoisonRecipe,
    SyntheticCorpusSpec,
    attack_corpus,
    gen_corpus,
    pooled_scores,
    token_feature_table,
)
from stressrank.rerank import (
    CandidatePool,
    DefendedRanking,
    Label,
    RerankConfig,
    ScoredCandidate,
    gate_center,
    gate_weight,
    rerank_pool,
)
from stressrank.signature import (
    GradientSignature,
    PenaltyBreakdown,
    PenaltyConfig,
    PerturbationKind,
    compute_penalties,
)


class ConfigError(Exception):
    """Raised for invalid or inconsistent experiment configuration."""


# Ablation variants: which of {gate, dispersion penalty, consistency penalty}
# stay enabled.  "full" is the complete defence; "neither" keeps only the gate.
ABLATION_VARIANTS: dict[str, dict[str, bool]] = {
    "full": dict(gate_enabled=True, dr_enabled=True, rep_enabled=True),
    "no_gate": dict(gate_enabled=False, dr_enabled=True, rep_enabled=True),
    "no_dr": dict(gate_enabled=True, dr_enabled=False, rep_enabled=True),
    "no_rep": dict(gate_enabled=True, dr_enabled=True, rep_enabled=False),
    "neither": dict(gate_enabled=True, dr_enabled=False, rep_enabled=False),
}


@dataclass(frozen=True)
class EncoderSpec:
    vocab_size: int = 512
    embed_dim: int = 32
    num_blocks: int = 4
    seed: int = 0

    def build(self) -> TinyEncoderParams:
        return TinyEncoderParams.initialize(
            vocab_size=self.vocab_size,
            embed_dim=self.embed_dim,
            num_blocks=self.num_blocks,
            seed=self.seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    recipe: PoisonRecipe = field(default_factory=PoisonRecipe)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    perturbation_kind: PerturbationKind = PerturbationKind.MIXED
    token_drop_p: float = 0.10
    encoder_drop_p: float = 0.10
    num_runs: int = 20
    probe_layer: int = 1
    k_values: tuple[int, ...] = (5, 10, 20, 30, 40, 50)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    pool_mode: str = "full"  # "full" | "bounded"
    bounded_b: int | None = None
    probe_floor: float = 0.0  # gate-weight floor below which candidates are not probed
    split_fraction: float = 0.2

    def __post_init__(self) -> None:
        pool_size = self.corpus.clean_per_query + self.corpus.poisons_per_query
        if not self.k_values:
            raise ConfigError("k_values must be non-empty")
        if any(k < 1 for k in self.k_values):
            raise ConfigError("every K must be at least 1")
        if max(self.k_values) > pool_size:
            raise ConfigError(
                f"K={max(self.k_values)} exceeds the pool size {pool_size}"
            )
        if self.pool_mode not in ("full", "bounded"):
            raise ConfigError(f"unknown pool_mode {self.pool_mode!r}")
        if self.pool_mode == "bounded":
            if self.bounded_b is None:
                raise ConfigError("bounded pool_mode requires bounded_b")
            if self.bounded_b <= max(self.k_values):
                raise ConfigError("bounded_b must exceed the largest K")
        if not 0 <= self.split_fraction < 1:
            raise ConfigError("split_fraction must lie in [0, 1)")
        if self.num_runs < 2:
            raise ConfigError("num_runs must be at least 2")
        if self.probe_layer < 1 or self.probe_layer > self.encoder.num_blocks:
            raise ConfigError("probe_layer out of range for the encoder")
        if not 0 <= self.probe_floor < 1:
            raise ConfigError("probe_floor must lie in [0, 1)")

    def perturbation_spec(self) -> PerturbationSpec:
        return PerturbationSpec(
            kind=self.perturbation_kind,
            token_drop_p=self.token_drop_p,
            encoder_drop_p=self.encoder_drop_p,
            master_seed=self.seed,
        )

    def probe_spec(self) -> ProbeSpec:
        return ProbeSpec(layer=self.probe_layer)

    def to_dict(self) -> dict[str, Any]:
        import enum

        def convert(obj: Any) -> Any:
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, enum.Enum):
                return obj.value
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return convert(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        try:
            kwargs: dict[str, Any] = {}
            if "corpus" in d:
                kwargs["corpus"] = SyntheticCorpusSpec(**d.pop("corpus"))
            if "recipe" in d:
                kwargs["recipe"] = PoisonRecipe(**d.pop("recipe"))
            if "encoder" in d:
                kwargs["encoder"] = EncoderSpec(**d.pop("encoder"))
            if "penalty" in d:
                kwargs["penalty"] = PenaltyConfig(**d.pop("penalty"))
            if "rerank" in d:
                rd = dict(d.pop("rerank"))
                if "selection_mode" in rd:
                    from stressrank.rerank import SelectionMode

                    rd["selection_mode"] = SelectionMode(rd["selection_mode"])
                kwargs["rerank"] = RerankConfig(**rd)
            if "perturbation_kind" in d:
                kwargs["perturbation_kind"] = PerturbationKind(d.pop("perturbation_kind"))
            if "k_values" in d:
                kwargs["k_values"] = tuple(int(k) for k in d.pop("k_values"))
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(d) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            kwargs.update(d)
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Load a YAML key-value tree config file, with optional top-level overrides."""
    import yaml

    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed config: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    if overrides:
        data.update(overrides)
    return ExperimentConfig.from_dict(data)


def selection_split(query_ids: Sequence[int], fraction: float, seed: int) -> tuple[set[int], set[int]]:
    """Disjoint (selection, evaluation) query-id split; selection gets
    ceil(fraction * n) ids drawn by a seeded permutation."""
    rng = np.random.default_rng(np.random.SeedSequence([0x59_17, abs(int(seed))]))
    ids = sorted(query_ids)
    perm = rng.permutation(len(ids))
    n_sel = math.ceil(fraction * len(ids) - 1e-9)
    selection = {ids[i] for i in perm[:n_sel]}
    evaluation = set(ids) - selection
    return selection, evaluation


@dataclass(frozen=True)
class QueryResult:
    """Everything the pipeline derived for one query pool."""

    query_id: int
    base_scores: dict[int, float]
    labels: dict[int, Label]
    penalties: dict[int, PenaltyBreakdown | None]
    rankings: dict[str, DefendedRanking]  # per ablation variant
    attacked: bool  # any poison in the undefended top-(min K)


@dataclass(frozen=True)
class PipelineResult:
    config: ExperimentConfig
    results: tuple[QueryResult, ...]
    selection_ids: frozenset[int]
    evaluation_ids: frozenset[int]
    signatures: dict[tuple[int, int], GradientSignature]

    def labels_map(self) -> dict[int, dict[int, Label]]:
        return {r.query_id: r.labels for r in self.results}

    def eval_rankings(self, variant: str, attacked_only: bool = True) -> list[DefendedRanking]:
        out = []
        for r in self.results:
            if r.query_id not in self.evaluation_ids:
                continue
            if attacked_only and not r.attacked:
                continue
            out.append(r.rankings[variant])
        return out

    def metric_rows(self) -> list[dict[str, Any]]:
        """Undefended plus one row per ablation variant, per K."""
        labels = self.labels_map()
        rows: list[dict[str, Any]] = []
        attacked_only = bool(self.eval_rankings("full"))
        full = self.eval_rankings("full", attacked_only)
        if not full:
            return rows
        for k in self.config.k_values:
            rows.append(
                {
                    "variant": "undefended",
                    "k": k,
                    "num_queries": len(full),
                    "phr": poison_hit_rate(full, labels, k, defended=False),
                    "prr": poison_recall_rate(full, labels, k, defended=False),
                }
            )
            for variant in ABLATION_VARIANTS:
                rankings = self.eval_rankings(variant, attacked_only)
                rows.append(
                    {
                        "variant": variant,
                        "k": k,
                        "num_queries": len(rankings),
                        "phr": poison_hit_rate(rankings, labels, k, defended=True),
                        "prr": poison_recall_rate(rankings, labels, k, defended=True),
                    }
                )
        return rows


def _probe_pool(
    pool: CorpusQuery,
    cfg: ExperimentConfig,
    params: TinyEncoderParams,
    probe_ids: set[int],
) -> dict[tuple[int, int], GradientSignature]:
    probe = cfg.probe_spec()
    spec = cfg.perturbation_spec()
    sigs: dict[tuple[int, int], GradientSignature] = {}
    for passage in pool.passages:
        if passage.passage_id not in probe_ids:
            continue
        sigs[(pool.query_id, passage.passage_id)] = signature_for_pair(
            pool.query,
            passage.seq,
            params,
            probe,
            spec,
            num_runs=cfg.num_runs,
            query_id=pool.query_id,
            passage_id=passage.passage_id,
        )
    return sigs


def _process_query(
    pool: CorpusQuery,
    cfg: ExperimentConfig,
    params: TinyEncoderParams,
    table: np.ndarray,
    probe_enabled: bool = True,
) -> tuple[QueryResult, dict[tuple[int, int], GradientSignature]]:
    base = pooled_scores(pool, params, table)
    labels = {p.passage_id: p.label for p in pool.passages}

    # Bounded mode restricts reranking (and probing) to the top-B candidates
    # by base score; the rest keep their base ranking below the pool.
    order = sorted(base, key=lambda p: (-base[p], p))
    if cfg.pool_mode == "bounded":
        b = min(cfg.bounded_b, len(order))
        pool_ids = order[:b]
    else:
        pool_ids = order

    mu = gate_center([base[p] for p in pool_ids])
    probe_ids: set[int] = set()
    if probe_enabled:
        probe_ids = {
            p for p in pool_ids if gate_weight(base[p], mu, cfg.rerank) >= cfg.probe_floor
        }
    sigs = _probe_pool(pool, cfg, params, probe_ids)
    penalties: dict[int, PenaltyBreakdown | None] = {
        p: (
            compute_penalties(sigs[(pool.query_id, p)], cfg.penalty)
            if (pool.query_id, p) in sigs
            else None
        )
        for p in pool_ids
    }

    candidates = tuple(
        ScoredCandidate(
            passage_id=p,
            base_score=base[p],
            penalties=penalties[p],
            label=labels[p],
        )
        for p in pool_ids
    )
    cpool = CandidatePool(query_id=pool.query_id, candidates=candidates)

    rankings: dict[str, DefendedRanking] = {}
    for variant, flags in ABLATION_VARIANTS.items():
        rankings[variant] = rerank_pool(cpool, replace(cfg.rerank, **flags))

    k_min = min(cfg.k_values)
    base_top = order[:k_min]
    attacked = any(labels[p] is Label.POISON for p in base_top)
    result = QueryResult(
        query_id=pool.query_id,
        base_scores=base,
        labels=labels,
        penalties=penalties,
        rankings=rankings,
        attacked=attacked,
    )
    return result, sigs


def run_pipeline(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    corpus: Sequence[CorpusQuery] | None = None,
) -> PipelineResult:
    """Full defence pipeline; optionally writes artifacts to ``out_dir``.

    A pre-attacked corpus can be supplied to skip generation and attack
    (used by the sweep for paired comparisons and by the CLI rerank path).
    """
    params = cfg.encoder.build()
    if corpus is None:
        corpus = gen_corpus(replace(cfg.corpus, seed=cfg.seed))
        if cfg.corpus.poisons_per_query > 0:
            corpus = attack_corpus(
                corpus, cfg.recipe, params, cfg.corpus.poisons_per_query, seed=cfg.seed
            )
    table = token_feature_table(params)

    selection, evaluation = selection_split(
        [p.query_id for p in corpus], cfg.split_fraction, cfg.seed
    )

    # A corpus without any poisoned passages has nothing to defend against;
    # skipping the probe stage keeps the defended ranking identical to the
    # base ranking instead of paying for signatures that will not be used.
    probe_enabled = any(
        p.label is Label.POISON for pool in corpus for p in pool.passages
    )

    results: list[QueryResult] = []
    signatures: dict[tuple[int, int], GradientSignature] = {}
    for pool in corpus:
        result, sigs = _process_query(pool, cfg, params, table, probe_enabled)
        results.append(result)
        signatures.update(sigs)

    pipeline = PipelineResult(
        config=cfg,
        results=tuple(results),
        selection_ids=frozenset(selection),
        evaluation_ids=frozenset(evaluation),
        signatures=signatures,
    )
    if out_dir is not None:
        write_artifacts(pipeline, Path(out_dir))
    return pipeline


def write_artifacts(pipeline: PipelineResult, out_dir: Path) -> None:
    """Emit the deterministic artifact set; remove partial output on failure."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        import yaml

        cfg_path = out_dir / "config.yaml"
        with open(cfg_path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(pipeline.config.to_dict(), fh, sort_keys=True)
        written.append(cfg_path)

        metrics_path = out_dir / "metrics.csv"
        srio.write_csv(
            metrics_path,
            ["variant", "k", "num_queries", "phr", "prr"],
            pipeline.metric_rows(),
        )
        written.append(metrics_path)

        labels = pipeline.labels_map()
        rankings = pipeline.eval_rankings("full")
        shift_rows = []
        if rankings:
            shifts = rank_shift_stats(rankings, labels)
            for name in ("poison_up", "poison_down", "clean_up", "clean_down"):
                st = getattr(shifts, name)
                shift_rows.append(
                    {
                        "bucket": name,
                        "count": st.count,
                        "max_shift": st.max_shift,
                        "mean_shift": st.mean_shift,
                    }
                )
        shift_path = out_dir / "rank_shift.csv"
        srio.write_csv(shift_path, ["bucket", "count", "max_shift", "mean_shift"], shift_rows)
        written.append(shift_path)

        pen_map = {
            (r.query_id, pid): pb
            for r in pipeline.results
            for pid, pb in r.penalties.items()
            if pb is not None
        }
        dist_rows = []
        if rankings:
            dists = penalty_distributions(rankings, labels, pen_map)
            for signal in sorted(dists):
                for cls in sorted(dists[signal]):
                    st = dists[signal][cls]
                    dist_rows.append(
                        {
                            "signal": signal,
                            "class": cls,
                            "count": st.count,
                            "mean": st.mean,
                            "q25": st.q25,
                            "median": st.median,
                            "q75": st.q75,
                        }
                    )
        dist_path = out_dir / "penalty_distributions.csv"
        srio.write_csv(
            dist_path,
            ["signal", "class", "count", "mean", "q25", "median", "q75"],
            dist_rows,
        )
        written.append(dist_path)

        traces_path = out_dir / "traces.jsonl"
        with open(traces_path, "w", encoding="utf-8") as fh:
            for r in pipeline.results:
                ranking = r.rankings["full"]
                obj = {
                    "query_id": r.query_id,
                    "split": "selection" if r.query_id in pipeline.selection_ids else "evaluation",
                    "attacked": r.attacked,
                    "base_order": ranking.base_order(),
                    "defended_order": ranking.defended_order(),
                    "top_k": list(ranking.top_k_ids),
                    "labels": {str(p): lab.value for p, lab in sorted(r.labels.items())},
                }
                fh.write(json.dumps(obj, sort_keys=True) + "\n")
        written.append(traces_path)

        split_path = out_dir / "split.json"
        with open(split_path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "selection": sorted(pipeline.selection_ids),
                    "evaluation": sorted(pipeline.evaluation_ids),
                },
                fh,
                sort_keys=True,
            )
            fh.write("\n")
        written.append(split_path)
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise


def export_signatures(
    pipeline: PipelineResult, path: str | Path, fmt: str = "text", source: str = "toy-encoder"
) -> None:
    base_scores = {
        (r.query_id, pid): s for r in pipeline.results for pid, s in r.base_scores.items()
    }
    sigs = [pipeline.signatures[k] for k in sorted(pipeline.signatures)]
    dump = srio.dump_from_signatures(
        sigs,
        base_scores,
        probe_layer=pipeline.config.probe_layer,
        perturbation_kind=pipeline.config.perturbation_kind,
        source=source,
    )
    srio.write_signature_dump(dump, path, fmt=fmt)


def import_signatures(
    path: str | Path,
) -> tuple[dict[tuple[int, int], GradientSignature], dict[tuple[int, int], float]]:
    """Load a dump into per-pair signatures plus base scores; warn on empty."""
    dump = srio.read_signature_dump(path)
    if not dump.records:
        print(f"warning: {path}: signature dump contains no records", file=sys.stderr)
    return dump.signatures(), dump.base_scores()


def rerank_imported(
    signatures: Mapping[tuple[int, int], GradientSignature],
    base_scores: Mapping[tuple[int, int], float],
    penalty_cfg: PenaltyConfig,
    rerank_cfg: RerankConfig,
) -> list[DefendedRanking]:
    """Defend retrieval pools described purely by an imported dump.

    This is the surrogate path: no encoder needed, only signatures and base
    scores produced elsewhere.
    """
    by_query: dict[int, list[tuple[int, float]]] = {}
    for (qid, pid), score in base_scores.items():
        by_query.setdefault(qid, []).append((pid, score))
    rankings = []
    for qid in sorted(by_query):
        candidates = tuple(
            ScoredCandidate(
                passage_id=pid,
                base_score=score,
                penalties=(
                    compute_penalties(signatures[(qid, pid)], penalty_cfg)
                    if (qid, pid) in signatures
                    else None
                ),
            )
            for pid, score in sorted(by_query[qid])
        )
        rankings.append(rerank_pool(CandidatePool(query_id=qid, candidates=candidates), rerank_cfg))
    return rankings


def sweep(
    cfg: ExperimentConfig,
    r_values: Sequence[int] = (4, 8, 16, 20, 32),
    l_values: Sequence[int] = (1,),
    kinds: Sequence[PerturbationKind] = (PerturbationKind.MIXED,),
    encoder_seeds: Sequence[int] = (0,),
    out_path: str | Path | None = None,
) -> list[dict[str, Any]]:
    """Long-format factor sweep: (encoder seed, R, L, perturbation kind) x K.

    The corpus and attack are shared per encoder seed so factor comparisons
    are paired; only the probing and reranking stages are recomputed.
    """
    rows: list[dict[str, Any]] = []
    for enc_seed in encoder_seeds:
        base_cfg = replace(cfg, encoder=replace(cfg.encoder, seed=enc_seed))
        params = base_cfg.encoder.build()
        corpus = gen_corpus(replace(base_cfg.corpus, seed=base_cfg.seed))
        if base_cfg.corpus.poisons_per_query > 0:
            corpus = attack_corpus(
                corpus, base_cfg.recipe, params, base_cfg.corpus.poisons_per_query,
                seed=base_cfg.seed,
            )
        for kind in kinds:
            for layer in l_values:
                for r in r_values:
                    point = replace(
                        base_cfg,
                        perturbation_kind=kind,
                        probe_layer=layer,
                        num_runs=r,
                    )
                    pipeline = run_pipeline(point, corpus=corpus)
                    labels = pipeline.labels_map()
                    full = pipeline.eval_rankings("full")
                    for k in point.k_values:
                        row = {
                            "encoder_seed": enc_seed,
                            "num_runs": r,
                            "probe_layer": layer,
                            "perturbation_kind": kind.value,
                            "k": k,
                            "num_queries": len(full),
                            "phr_base": poison_hit_rate(full, labels, k, defended=False) if full else 0.0,
                            "prr_base": poison_recall_rate(full, labels, k, defended=False) if full else 0.0,
                            "phr_defended": poison_hit_rate(full, labels, k, defended=True) if full else 0.0,
                            "prr_defended": poison_recall_rate(full, labels, k, defended=True) if full else 0.0,
                        }
                        rows.append(row)
    if out_path is not None:
        srio.write_csv(
            out_path,
            [
                "encoder_seed", "num_runs", "probe_layer", "perturbation_kind", "k",
                "num_queries", "phr_base", "prr_base", "phr_defended", "prr_defended",
            ],
            rows,
        )
    return rows
