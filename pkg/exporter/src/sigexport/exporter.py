"""Probe-gradient signature extraction from transformer bi-encoder checkpoints.

For every (query, passage) pair the exporter re-scores the pair under R
randomized perturbations and records, per run, the gradient of the
similarity with respect to one LayerNorm's gain and bias.  Similarity is
the inner product of l2-normalized mean-pooled token embeddings from a
shared encoder.  Perturbations:

- ``token``: random dropout on the passage attention mask.  Special
  tokens (CLS/SEP) are always kept and at least one content token
  survives; the query mask is untouched.
- ``encoder``: the checkpoint's own dropout layers, enabled by putting
  the model in train mode for both towers, at the probabilities baked
  into the checkpoint config.
- ``mixed``: both.

Per-run randomness is derived from (seed, query_id, passage_id, run), so
exports are reproducible up to backend nondeterminism.  Records whose
gradients come out non-finite are skipped with a log message.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dump import DumpHeader, DumpRecord, KIND_CODES, write_dump

log = logging.getLogger("sigexport")


class ProbeLayerError(ValueError):
    """The configured probe module does not exist or is not a LayerNorm."""


@dataclass(frozen=True)
class TextPair:
    query_id: int
    passage_id: int
    query: str
    passage: str


@dataclass(frozen=True)
class ExporterConfig:
    checkpoint: str
    probe_layer: int = 3
    # Explicit dotted path to the probed LayerNorm.  Checkpoints disagree on
    # which of a block's LayerNorms is "the" layer-L norm, so the mapping is
    # configurable; the default targets the output LayerNorm of block
    # ``probe_layer`` (1-based) in a BERT-style encoder.
    probe_module: str | None = None
    perturbation_kind: str = "mixed"
    token_drop_p: float = 0.10
    num_runs: int = 20
    batch_size: int = 8
    seed: int = 0
    output: str = "signatures.bin"
    fmt: str = "binary"
    source: str = ""

    def __post_init__(self) -> None:
        if self.num_runs < 2:
            raise ValueError("num_runs must be >= 2")
        if self.perturbation_kind not in KIND_CODES:
            raise ValueError(f"unknown perturbation kind {self.perturbation_kind!r}")
        if not 0.0 <= self.token_drop_p < 1.0:
            raise ValueError("token_drop_p must be in [0, 1)")
        if self.probe_layer < 1:
            raise ValueError("probe_layer is 1-based and must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolved_probe_module(self) -> str:
        if self.probe_module is not None:
            return self.probe_module
        return f"encoder.layer.{self.probe_layer - 1}.output.LayerNorm"

    def resolved_source(self) -> str:
        return self.source or self.checkpoint

    @property
    def token_dropout_active(self) -> bool:
        return self.perturbation_kind in ("token", "mixed") and self.token_drop_p > 0

    @property
    def encoder_dropout_active(self) -> bool:
        return self.perturbation_kind in ("encoder", "mixed")


def load_checkpoint(cfg: ExporterConfig):
    from transformers import AutoModel, AutoTokenizer

    model = AutoModel.from_pretrained(cfg.checkpoint)
    tokenizer = AutoTokenizer.from_pretrained(cfg.checkpoint)
    return model, tokenizer


def resolve_probe(model: torch.nn.Module, cfg: ExporterConfig) -> torch.nn.LayerNorm:
    path = cfg.resolved_probe_module()
    try:
        module = model.get_submodule(path)
    except AttributeError as exc:
        raise ProbeLayerError(f"no module at {path!r} in the checkpoint") from exc
    if not isinstance(module, torch.nn.LayerNorm) or module.bias is None:
        raise ProbeLayerError(f"module at {path!r} is not a LayerNorm with gain and bias")
    return module


def _pooled(model, input_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """l2-normalized mean pooling of the final hidden states over the mask."""
    out = model(input_ids=input_ids, attention_mask=mask).last_hidden_state
    m = mask.to(out.dtype).unsqueeze(-1)
    pooled = (out * m).sum(dim=1) / m.sum(dim=1)
    return torch.nn.functional.normalize(pooled, dim=-1)


def _run_seeds(cfg: ExporterConfig, pair: TextPair, run: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence(
        [abs(cfg.seed), abs(pair.query_id), abs(pair.passage_id), run]
    )
    mask_seq, torch_seq = ss.spawn(2)
    return np.random.default_rng(mask_seq), int(torch_seq.generate_state(1)[0])


def _dropped_passage_mask(
    mask: torch.Tensor, special: torch.Tensor, p: float, rng: np.random.Generator
) -> torch.Tensor:
    """Random token dropout on one passage attention mask.

    Special tokens are always kept and at least one content token always
    survives, so a two-token passage can never be emptied.
    """
    mask = mask.clone()
    content = ((mask == 1) & (special == 0)).nonzero(as_tuple=True)[1]
    keep = rng.random(len(content)) >= p
    if len(content) and not keep.any():
        keep[int(rng.integers(len(content)))] = True
    mask[0, content[~torch.from_numpy(keep)]] = 0
    return mask


def base_scores(model, tokenizer, pairs: list[TextPair],
                batch_size: int = 8) -> dict[tuple[int, int], float]:
    """Unperturbed similarities, batched, in eval mode."""
    model.eval()
    scores: dict[tuple[int, int], float] = {}
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            q = tokenizer([p.query for p in chunk], return_tensors="pt", padding=True)
            d = tokenizer([p.passage for p in chunk], return_tensors="pt", padding=True)
            qe = _pooled(model, q["input_ids"], q["attention_mask"])
            de = _pooled(model, d["input_ids"], d["attention_mask"])
            sims = (qe * de).sum(dim=-1)
            for pair, s in zip(chunk, sims):
                scores[(pair.query_id, pair.passage_id)] = float(s)
    return scores


def pair_runs(model, tokenizer, pair: TextPair, probe: torch.nn.LayerNorm,
              cfg: ExporterConfig) -> np.ndarray | None:
    """The (R, 2d) probe-gradient matrix for one pair, or None if any run
    produced non-finite gradients."""
    q = tokenizer(pair.query, return_tensors="pt")
    d = tokenizer(pair.passage, return_tensors="pt",
                  return_special_tokens_mask=True)
    special = d["special_tokens_mask"]

    model.train(cfg.encoder_dropout_active)
    rows = []
    for r in range(cfg.num_runs):
        rng, torch_seed = _run_seeds(cfg, pair, r)
        torch.manual_seed(torch_seed)
        d_mask = d["attention_mask"]
        if cfg.token_dropout_active:
            d_mask = _dropped_passage_mask(d_mask, special, cfg.token_drop_p, rng)
        qe = _pooled(model, q["input_ids"], q["attention_mask"])
        de = _pooled(model, d["input_ids"], d_mask)
        s = (qe * de).sum()
        d_gain, d_bias = torch.autograd.grad(s, [probe.weight, probe.bias])
        row = torch.cat([d_gain, d_bias]).detach().double().numpy()
        if not np.all(np.isfinite(row)):
            log.warning(
                "skipping pair (%d, %d): non-finite gradient at run %d",
                pair.query_id, pair.passage_id, r,
            )
            model.eval()
            return None
        rows.append(row)
    model.eval()
    return np.stack(rows)


def export(pairs: list[TextPair], cfg: ExporterConfig,
           model=None, tokenizer=None) -> Path:
    """Export probe-gradient signatures for all pairs to a dump file."""
    if model is None or tokenizer is None:
        model, tokenizer = load_checkpoint(cfg)
    probe = resolve_probe(model, cfg)
    for param in model.parameters():
        param.requires_grad_(False)
    probe.weight.requires_grad_(True)
    probe.bias.requires_grad_(True)

    scores = base_scores(model, tokenizer, pairs, cfg.batch_size)
    records: list[DumpRecord] = []
    for pair in pairs:
        runs = pair_runs(model, tokenizer, pair, probe, cfg)
        if runs is None:
            continue
        records.append(
            DumpRecord(
                query_id=pair.query_id,
                passage_id=pair.passage_id,
                base_score=scores[(pair.query_id, pair.passage_id)],
                runs=runs,
            )
        )

    header = DumpHeader(
        num_runs=cfg.num_runs,
        probe_dim=2 * probe.weight.numel(),
        probe_layer=cfg.probe_layer,
        perturbation_kind=cfg.perturbation_kind,
        source=cfg.resolved_source(),
    )
    out = Path(cfg.output)
    write_dump(header, records, out, fmt=cfg.fmt)
    log.info("wrote %d records to %s", len(records), out)
    return out
