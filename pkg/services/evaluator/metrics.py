"""Prometheus metrics for evaluation and ablation."""

from __future__ import annotations

from prometheus_client import Counter, Histogram

ABLATION_CELLS = Counter(
    "evaluator_ablation_cells_total",
    "Ablation cells (combination x seed) completed",
    ["combination"],
)

A_DISTANCE_LATENCY = Histogram(
    "evaluator_a_distance_latency_seconds",
    "Time to fit and score one A-distance probe",
    buckets=[0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0],
)
