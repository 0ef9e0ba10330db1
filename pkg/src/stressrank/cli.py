"""Command-line entry point.

Subcommands cover each pipeline stage (gen-corpus, attack, probe, rerank,
eval), the orchestrated runs (pipeline, sweep), the mechanism simulator, the
signature-dump interop (import-signatures, export-signatures), and text
metrics over response files (metrics-gen).  Exit codes: 0 success, 2 config
error, 3 data-format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from stressrank import io as srio
from stressrank.encoder import load_params, save_params
from stressrank.harness import (
    ConfigError,
    ExperimentConfig,
    export_signatures,
    import_signatures,
    load_config,
    rerank_imported,
    run_pipeline,
    sweep,
)
from stressrank.io import DataFormatError
from stressrank.mechanism import simulation_grid
from stressrank.metrics import acc_substring, asr_substring
from stressrank.poison import attack_corpus, gen_corpus
from stressrank.signature import PerturbationKind

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is not None:
        try:
            return load_config(args.config, overrides)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {exc}") from exc
    return ExperimentConfig.from_dict(overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path("out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _params_for(cfg: ExperimentConfig, args: argparse.Namespace):
    if getattr(args, "params", None):
        return load_params(args.params)
    return cfg.encoder.build()


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    corpus = gen_corpus(replace(cfg.corpus, seed=cfg.seed))
    srio.write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} query pools to {args.out}")
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    corpus = srio.read_corpus(args.corpus)
    params = _params_for(cfg, args)
    attacked = attack_corpus(
        corpus, cfg.recipe, params, cfg.corpus.poisons_per_query, seed=cfg.seed
    )
    srio.write_corpus(attacked, args.out)
    n_poison = sum(
        1 for pool in attacked for p in pool.passages if p.label.value == "poison"
    )
    print(f"wrote {len(attacked)} pools with {n_poison} poisoned passages to {args.out}")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    corpus = srio.read_corpus(args.corpus)
    pipeline = run_pipeline(cfg, corpus=corpus)
    if not pipeline.signatures:
        print("warning: no candidates were probed (no poisons in corpus?)", file=sys.stderr)
        return EXIT_DATA
    export_signatures(pipeline, args.out, fmt=args.format)
    print(f"wrote {len(pipeline.signatures)} signatures to {args.out}")
    return EXIT_OK


def cmd_rerank(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    sigs, base_scores = import_signatures(args.signatures)
    rankings = rerank_imported(sigs, base_scores, cfg.penalty, cfg.rerank)
    with open(args.out, "w", encoding="utf-8") as fh:
        for ranking in rankings:
            obj = {
                "query_id": ranking.query_id,
                "base_order": ranking.base_order(),
                "defended_order": ranking.defended_order(),
                "top_k": list(ranking.top_k_ids),
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    print(f"wrote {len(rankings)} defended rankings to {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    corpus = srio.read_corpus(args.corpus)
    out = _out_dir(args)
    run_pipeline(cfg, out_dir=out, corpus=corpus)
    print(f"wrote metrics artifacts to {out}")
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    pipeline = run_pipeline(cfg, out_dir=out)
    if args.save_params:
        save_params(cfg.encoder.build(), out / "encoder_params.npz")
    if args.export_signatures:
        export_signatures(pipeline, out / "signatures.dump", fmt=args.format)
    print(f"wrote pipeline artifacts to {out}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    r_values = tuple(int(x) for x in args.r_values.split(","))
    l_values = tuple(int(x) for x in args.l_values.split(","))
    kinds = tuple(PerturbationKind(x) for x in args.kinds.split(","))
    encoder_seeds = tuple(int(x) for x in args.encoder_seeds.split(","))
    rows = sweep(
        cfg,
        r_values=r_values,
        l_values=l_values,
        kinds=kinds,
        encoder_seeds=encoder_seeds,
        out_path=out / "sweep.csv",
    )
    print(f"wrote {len(rows)} sweep rows to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_simulate_mechanism(args: argparse.Namespace) -> int:
    rows = simulation_grid(num_runs=args.runs, seed=args.seed or 0)
    srio.write_csv(
        args.out,
        ["rho", "ratio", "sigma", "empirical_rep", "predicted_rep", "empirical_p_dr"],
        rows,
    )
    print(f"wrote {len(rows)} simulation rows to {args.out}")
    return EXIT_OK


def cmd_import_signatures(args: argparse.Namespace) -> int:
    sigs, base_scores = import_signatures(args.input)
    queries = {qid for qid, _ in base_scores}
    print(
        f"{args.input}: {len(sigs)} signatures over {len(queries)} queries "
        f"(header-valid)"
    )
    return EXIT_OK


def cmd_export_signatures(args: argparse.Namespace) -> int:
    dump = srio.read_signature_dump(args.input)
    srio.write_signature_dump(dump, args.out, fmt=args.format)
    print(f"converted {args.input} -> {args.out} ({args.format})")
    return EXIT_OK


def cmd_metrics_gen(args: argparse.Namespace) -> int:
    records = srio.read_responses(args.responses)
    if not records:
        print(f"{args.responses}: no response records", file=sys.stderr)
        return EXIT_DATA
    rows = [
        {
            "metric": "asr_substring",
            "value": asr_substring(records),
            "num_responses": len(records),
        },
        {
            "metric": "acc_substring",
            "value": acc_substring(records),
            "num_responses": len(records),
        },
    ]
    srio.write_csv(args.out, ["metric", "value", "num_responses"], rows)
    print(f"wrote response metrics to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stressrank",
        description="Probe-gradient stability defence for dense-retriever ranking.",
    )
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--config", type=str, default=None, help="YAML config file")
    parser.add_argument("--out-dir", type=str, default=None, help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a clean synthetic corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("attack", help="add optimized poisoned passages to a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None, help="encoder params file (npz)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("probe", help="collect gradient signatures for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("rerank", help="defend rankings from a signature dump")
    p.add_argument("--signatures", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="run rerank+metrics over an attacked corpus")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="full generate->attack->probe->rerank->measure run")
    p.add_argument("--save-params", action="store_true")
    p.add_argument("--export-signatures", action="store_true")
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="factor sweep over R, probe layer, kind, encoder seed")
    p.add_argument("--r-values", default="4,8,16,20,32")
    p.add_argument("--l-values", default="1")
    p.add_argument("--kinds", default="mixed")
    p.add_argument("--encoder-seeds", default="0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate-mechanism", help="gated-decomposition simulator grid")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=10_000)
    p.set_defaults(func=cmd_simulate_mechanism)

    p = sub.add_parser("import-signatures", help="validate and summarize a dump")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_import_signatures)

    p = sub.add_parser("export-signatures", help="convert a dump between formats")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("text", "binary"), default="binary")
    p.set_defaults(func=cmd_export_signatures)

    p = sub.add_parser("metrics-gen", help="substring attack-success/accuracy over responses")
    p.add_argument("--responses", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics_gen)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError, ZeroDivisionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
