"""Probe-gradient signature exporter for transformer bi-encoder checkpoints."""

from .dump import DumpHeader, DumpRecord, write_dump
from .exporter import ExporterConfig, ProbeLayerError, TextPair, base_scores, export
from .reference import ReferenceStats, reference_stats

__all__ = [
    "DumpHeader",
    "DumpRecord",
    "ExporterConfig",
    "ProbeLayerError",
    "ReferenceStats",
    "TextPair",
    "base_scores",
    "export",
    "reference_stats",
    "write_dump",
]
