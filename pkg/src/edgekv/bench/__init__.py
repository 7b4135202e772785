"""Microbenchmarks: put latency by type, the k-stage pipeline, and the dispatch fast path."""

from .dispatch import run_fastpath_bench, trie_level_cost
from .pipeline import pipeline_dfg, run_pipeline_bench
from .put import run_put_bench
from .report import BenchReport, LatencySample, SummaryRow

__all__ = [
    "BenchReport",
    "LatencySample",
    "SummaryRow",
    "pipeline_dfg",
    "run_fastpath_bench",
    "run_pipeline_bench",
    "run_put_bench",
    "trie_level_cost",
]
