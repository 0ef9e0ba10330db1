"""File formats: corpora, signature dumps, responses, rankings, CSV helpers.

Corpora and response files are line-delimited JSON with explicit integer
token arrays.  Signature dumps carry a versioned header plus one record per
query--passage pair; they exist in a decimal-text flavour (diffable, full
precision) and a little-endian 32-bit-float binary flavour (compact,
byte-stable).  All writers are deterministic: no timestamps, sorted keys,
shortest round-trip float formatting.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from stressrank.encoder import TokenSeq
from stressrank.metrics import ResponseRecord
from stressrank.poison import CorpusQuery, LabeledPassage
from stressrank.rerank import Label
from stressrank.signature import GradientSignature, PerturbationKind


class DataFormatError(Exception):
    """Raised for malformed, truncated or inconsistent data files."""


SIGNATURE_FORMAT_VERSION = 1
_BINARY_MAGIC = b"SRSG"
_KIND_CODES = {PerturbationKind.TOKEN: 0, PerturbationKind.ENCODER: 1, PerturbationKind.MIXED: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class SignatureRecord:
    query_id: int
    passage_id: int
    base_score: float
    runs: np.ndarray  # (R, P)


@dataclass(frozen=True)
class SignatureDump:
    num_runs: int
    probe_dim: int
    probe_layer: int
    perturbation_kind: PerturbationKind
    source: str
    records: tuple[SignatureRecord, ...]
    format_version: int = SIGNATURE_FORMAT_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(
            self, "perturbation_kind", PerturbationKind(self.perturbation_kind)
        )
        seen: set[tuple[int, int]] = set()
        for i, rec in enumerate(self.records):
            if rec.runs.shape != (self.num_runs, self.probe_dim):
                raise DataFormatError(
                    f"record {i}: runs shape {rec.runs.shape} does not match "
                    f"header ({self.num_runs}, {self.probe_dim})"
                )
            pair = (rec.query_id, rec.passage_id)
            if pair in seen:
                raise DataFormatError(f"record {i}: duplicate pair id {pair}")
            seen.add(pair)

    def signatures(self) -> dict[tuple[int, int], GradientSignature]:
        return {
            (rec.query_id, rec.passage_id): GradientSignature(
                pair_id=(rec.query_id, rec.passage_id),
                runs=rec.runs,
                perturbation_kind=self.perturbation_kind,
                probe_layer=max(1, self.probe_layer),
            )
            for rec in self.records
        }

    def base_scores(self) -> dict[tuple[int, int], float]:
        return {(rec.query_id, rec.passage_id): rec.base_score for rec in self.records}


def _fmt_float(x: float) -> float:
    return float(x)


def write_signature_dump(dump: SignatureDump, path: str | Path, fmt: str = "text") -> None:
    path = Path(path)
    if fmt == "text":
        _write_dump_text(dump, path)
    elif fmt == "binary":
        _write_dump_binary(dump, path)
    else:
        raise ValueError(f"unknown dump format {fmt!r}")


def read_signature_dump(path: str | Path) -> SignatureDump:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == _BINARY_MAGIC:
        return _read_dump_binary(path)
    return _read_dump_text(path)


def _write_dump_text(dump: SignatureDump, path: Path) -> None:
    header = {
        "format": "stressrank-signature-dump",
        "version": dump.format_version,
        "num_runs": dump.num_runs,
        "probe_dim": dump.probe_dim,
        "probe_layer": dump.probe_layer,
        "perturbation_kind": dump.perturbation_kind.value,
        "source": dump.source,
        "num_records": len(dump.records),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in dump.records:
            obj = {
                "query_id": rec.query_id,
                "passage_id": rec.passage_id,
                "base_score": _fmt_float(rec.base_score),
                "runs": [[_fmt_float(v) for v in row] for row in rec.runs],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _read_dump_text(path: Path) -> SignatureDump:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty signature dump file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed header: {exc}") from exc
    if header.get("format") != "stressrank-signature-dump":
        raise DataFormatError(f"{path}: not a signature dump")
    if header.get("version") != SIGNATURE_FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {header.get('version')}")
    expected = int(header["num_records"])
    body = lines[1:]
    if len(body) != expected:
        raise DataFormatError(
            f"{path}: truncated dump: header announces {expected} records, "
            f"found {len(body)} (failure at record {len(body)})"
        )
    records = []
    for i, line in enumerate(body):
        try:
            obj = json.loads(line)
            runs = np.asarray(obj["runs"], dtype=np.float64)
            records.append(
                SignatureRecord(
                    query_id=int(obj["query_id"]),
                    passage_id=int(obj["passage_id"]),
                    base_score=float(obj["base_score"]),
                    runs=runs,
                )
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataFormatError(f"{path}: malformed record {i}: {exc}") from exc
    try:
        return SignatureDump(
            num_runs=int(header["num_runs"]),
            probe_dim=int(header["probe_dim"]),
            probe_layer=int(header["probe_layer"]),
            perturbation_kind=PerturbationKind(header["perturbation_kind"]),
            source=str(header["source"]),
            records=tuple(records),
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: header missing field {exc}") from exc


def _write_dump_binary(dump: SignatureDump, path: Path) -> None:
    source = dump.source.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<IIIiB", dump.format_version, dump.num_runs,
                             dump.probe_dim, dump.probe_layer,
                             _KIND_CODES[dump.perturbation_kind]))
        fh.write(struct.pack("<H", len(source)))
        fh.write(source)
        fh.write(struct.pack("<Q", len(dump.records)))
        for rec in dump.records:
            fh.write(struct.pack("<qqf", rec.query_id, rec.passage_id, rec.base_score))
            fh.write(np.asarray(rec.runs, dtype="<f4").tobytes())


def _read_dump_binary(path: Path) -> SignatureDump:
    data = Path(path).read_bytes()
    try:
        if data[:4] != _BINARY_MAGIC:
            raise DataFormatError(f"{path}: bad magic")
        off = 4
        version, num_runs, probe_dim, probe_layer, kind_code = struct.unpack_from("<IIIiB", data, off)
        off += struct.calcsize("<IIIiB")
        if version != SIGNATURE_FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        (source_len,) = struct.unpack_from("<H", data, off)
        off += 2
        source = data[off : off + source_len].decode("utf-8")
        off += source_len
        (num_records,) = struct.unpack_from("<Q", data, off)
        off += 8
        rec_head = struct.calcsize("<qqf")
        rec_body = num_runs * probe_dim * 4
        records = []
        for i in range(num_records):
            if off + rec_head + rec_body > len(data):
                raise DataFormatError(f"{path}: truncated dump at record {i}")
            qid, pid, base = struct.unpack_from("<qqf", data, off)
            off += rec_head
            runs = np.frombuffer(data, dtype="<f4", count=num_runs * probe_dim, offset=off)
            off += rec_body
            records.append(
                SignatureRecord(
                    query_id=qid,
                    passage_id=pid,
                    base_score=float(base),
                    runs=runs.astype(np.float64).reshape(num_runs, probe_dim),
                )
            )
        if off != len(data):
            raise DataFormatError(f"{path}: {len(data) - off} trailing bytes after last record")
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated dump header: {exc}") from exc
    return SignatureDump(
        num_runs=num_runs,
        probe_dim=probe_dim,
        probe_layer=probe_layer,
        perturbation_kind=_CODE_KINDS[kind_code],
        source=source,
        records=tuple(records),
    )


def dump_from_signatures(
    signatures: Iterable[GradientSignature],
    base_scores: dict[tuple[int, int], float],
    probe_layer: int,
    perturbation_kind: PerturbationKind,
    source: str,
) -> SignatureDump:
    sigs = list(signatures)
    if not sigs:
        raise DataFormatError("cannot build a dump from zero signatures")
    records = tuple(
        SignatureRecord(
            query_id=s.pair_id[0],
            passage_id=s.pair_id[1],
            base_score=base_scores[s.pair_id],
            runs=s.runs,
        )
        for s in sigs
    )
    return SignatureDump(
        num_runs=sigs[0].num_runs,
        probe_dim=sigs[0].probe_dim,
        probe_layer=probe_layer,
        perturbation_kind=perturbation_kind,
        source=source,
        records=records,
    )


def write_corpus(corpus: Sequence[CorpusQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pool in corpus:
            obj = {
                "query_id": pool.query_id,
                "query_tokens": list(pool.query.tokens),
                "passages": [
                    {
                        "passage_id": p.passage_id,
                        "label": p.label.value,
                        "tokens": list(p.seq.tokens),
                        "attack_succeeded": p.attack_succeeded,
                    }
                    for p in pool.passages
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[CorpusQuery]:
    pools: list[CorpusQuery] = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                passages = tuple(
                    LabeledPassage(
                        passage_id=int(p["passage_id"]),
                        seq=TokenSeq(tuple(int(t) for t in p["tokens"])),
                        label=Label(p["label"]),
                        attack_succeeded=p.get("attack_succeeded"),
                    )
                    for p in obj["passages"]
                )
                pools.append(
                    CorpusQuery(
                        query_id=int(obj["query_id"]),
                        query=TokenSeq(tuple(int(t) for t in obj["query_tokens"])),
                        passages=passages,
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}: bad corpus line {i}: {exc}") from exc
    return pools


def read_responses(path: str | Path) -> list[ResponseRecord]:
    records: list[ResponseRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    ResponseRecord(
                        query_id=int(obj["query_id"]),
                        response=str(obj["response"]),
                        correct_answer=str(obj["correct_answer"]),
                        adv_answer=str(obj["adv_answer"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}: bad response line {i}: {exc}") from exc
    return records


def write_csv(path: str | Path, fieldnames: Sequence[str], rows: Iterable[dict]) -> None:
    """Deterministic CSV writer: fixed column order, repr-formatted floats."""
    import csv

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
