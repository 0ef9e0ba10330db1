"""Writers for the signature-dump interchange format.

The exporter talks to the reranking core only through dump files, so the
two formats are replicated here byte-for-byte rather than imported:

- text: one JSON header line, then one JSON object per record, keys
  sorted;
- binary: ``SRSG`` magic, a packed little-endian header, a
  length-prefixed source tag, a record count, then per-record ids, a
  float32 base score, and the float32 run matrix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_NAME = "stressrank-signature-dump"
FORMAT_VERSION = 1
BINARY_MAGIC = b"SRSG"
KIND_CODES = {"token": 0, "encoder": 1, "mixed": 2}


@dataclass(frozen=True)
class DumpRecord:
    query_id: int
    passage_id: int
    base_score: float
    runs: np.ndarray  # (R, P) float64


@dataclass(frozen=True)
class DumpHeader:
    num_runs: int
    probe_dim: int
    probe_layer: int
    perturbation_kind: str
    source: str

    def __post_init__(self) -> None:
        if self.perturbation_kind not in KIND_CODES:
            raise ValueError(f"unknown perturbation kind {self.perturbation_kind!r}")
        if self.num_runs < 2:
            raise ValueError("num_runs must be >= 2")


def write_dump(header: DumpHeader, records: list[DumpRecord], path: str | Path,
               fmt: str = "binary") -> None:
    for i, rec in enumerate(records):
        if rec.runs.shape != (header.num_runs, header.probe_dim):
            raise ValueError(
                f"record {i}: runs shape {rec.runs.shape} does not match "
                f"header ({header.num_runs}, {header.probe_dim})"
            )
    if fmt == "text":
        _write_text(header, records, Path(path))
    elif fmt == "binary":
        _write_binary(header, records, Path(path))
    else:
        raise ValueError(f"unknown dump format {fmt!r}")


def _write_text(header: DumpHeader, records: list[DumpRecord], path: Path) -> None:
    head = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_runs": header.num_runs,
        "probe_dim": header.probe_dim,
        "probe_layer": header.probe_layer,
        "perturbation_kind": header.perturbation_kind,
        "source": header.source,
        "num_records": len(records),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in records:
            obj = {
                "query_id": rec.query_id,
                "passage_id": rec.passage_id,
                "base_score": float(rec.base_score),
                "runs": [[float(v) for v in row] for row in rec.runs],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _write_binary(header: DumpHeader, records: list[DumpRecord], path: Path) -> None:
    source = header.source.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IIIiB", FORMAT_VERSION, header.num_runs,
                             header.probe_dim, header.probe_layer,
                             KIND_CODES[header.perturbation_kind]))
        fh.write(struct.pack("<H", len(source)))
        fh.write(source)
        fh.write(struct.pack("<Q", len(records)))
        for rec in records:
            fh.write(struct.pack("<qqf", rec.query_id, rec.passage_id, rec.base_score))
            fh.write(np.asarray(rec.runs, dtype="<f4").tobytes())
