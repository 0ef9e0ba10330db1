"""Command-line entry point: ``stressrank-export``.

Reads pairs from a JSONL file (one object per line with ``query_id``,
``passage_id``, ``query``, ``passage``) and writes a signature dump.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .exporter import ExporterConfig, ProbeLayerError, TextPair, export


def read_pairs(path: str) -> list[TextPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            pairs.append(
                TextPair(
                    query_id=int(obj["query_id"]),
                    passage_id=int(obj["passage_id"]),
                    query=str(obj["query"]),
                    passage=str(obj["passage"]),
                )
            )
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stressrank-export",
        description="Export probe-gradient signatures from a retriever checkpoint",
    )
    parser.add_argument("--checkpoint", required=True, help="model path or hub id")
    parser.add_argument("--pairs", required=True, help="JSONL file of query/passage pairs")
    parser.add_argument("--probe-layer", type=int, default=3)
    parser.add_argument("--probe-module", default=None,
                        help="dotted path to the probed LayerNorm "
                             "(default: encoder.layer.<L-1>.output.LayerNorm)")
    parser.add_argument("--kind", default="mixed", choices=["token", "encoder", "mixed"])
    parser.add_argument("--token-drop-p", type=float, default=0.10)
    parser.add_argument("--runs", type=int, default=20)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="signatures.bin")
    parser.add_argument("--format", default="binary", choices=["text", "binary"])
    parser.add_argument("--source", default="", help="source tag for the dump header")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    cfg = ExporterConfig(
        checkpoint=args.checkpoint,
        probe_layer=args.probe_layer,
        probe_module=args.probe_module,
        perturbation_kind=args.kind,
        token_drop_p=args.token_drop_p,
        num_runs=args.runs,
        batch_size=args.batch_size,
        seed=args.seed,
        output=args.out,
        fmt=args.format,
        source=args.source,
    )
    try:
        pairs = read_pairs(args.pairs)
        export(pairs, cfg)
    except (ProbeLayerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
