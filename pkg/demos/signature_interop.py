"""Signature-dump interop: write probe signatures to the text and binary
dump formats, read them back, and rerank from the file alone.

This is the path an external exporter takes — anything that can emit the
dump format can borrow the defence without touching the toy encoder.
"""

import tempfile
from pathlib import Path

import numpy as np

from stressrank.harness import rerank_imported
from stressrank.io import SignatureDump, SignatureRecord, read_signature_dump, write_signature_dump
from stressrank.rerank import RerankConfig
from stressrank.signature import PenaltyConfig

rng = np.random.default_rng(0)

# Fabricate a pool of 8 passages for one query: the first six have stable
# gradient runs, the last two lose a large component in ~40% of runs (the
# footprint a perturbation-sensitive poison leaves behind).
records = []
base_scores = {}
for pid in range(8):
    u = rng.normal(size=16)
    runs = np.tile(u, (20, 1)) + 0.05 * rng.normal(size=(20, 16))
    if pid >= 6:
        gates = rng.random(20) < 0.6
        runs = runs * gates[:, None] * 2.5
    score = 0.95 - 0.02 * pid if pid < 6 else 0.99 - 0.005 * (pid - 6)
    base_scores[(0, pid)] = score
    records.append(
        SignatureRecord(query_id=0, passage_id=pid, base_score=score, runs=runs)
    )

dump = SignatureDump(
    num_runs=20,
    probe_dim=16,
    probe_layer=1,
    perturbation_kind="mixed",
    source="demo-fabricated",
    records=tuple(records),
)

with tempfile.TemporaryDirectory() as tmp:
    text_path = Path(tmp) / "sig.jsonl"
    bin_path = Path(tmp) / "sig.bin"
    write_signature_dump(dump, text_path, fmt="text")
    write_signature_dump(dump, bin_path, fmt="binary")
    print(f"text dump: {text_path.stat().st_size} bytes")
    print(f"binary dump: {bin_path.stat().st_size} bytes")

    loaded = read_signature_dump(bin_path)
    print(f"reloaded {len(loaded.records)} records "
          f"(R={loaded.num_runs}, P={loaded.probe_dim}, source={loaded.source!r})\n")

    rankings = rerank_imported(
        loaded.signatures(), loaded.base_scores(), PenaltyConfig(), RerankConfig(k=5)
    )

ranking = rankings[0]
print(f"{'pid':>4} {'base':>7} {'b_rank':>6} {'d_rank':>6} {'penalty':>8}")
for rec in sorted(ranking.records, key=lambda r: r.defended_rank):
    print(f"{rec.passage_id:>4} {rec.base_score:>7.3f} {rec.base_rank:>6}"
          f" {rec.defended_rank:>6} {rec.penalty_sum:>8.3f}")
print("\ndefended top-5:", list(ranking.top_k_ids))
