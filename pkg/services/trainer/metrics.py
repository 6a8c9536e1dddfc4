"""Prometheus metrics for the training loop."""

from __future__ import annotations

from prometheus_client import Counter, Gauge, Histogram

TRAIN_STEPS = Counter(
    "trainer_steps_total",
    "Total training iterations completed",
)

STEP_LATENCY = Histogram(
    "trainer_step_latency_seconds",
    "Wall time of one four-stage training step",
    buckets=[0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0],
)

STAGE_UPDATES = Counter(
    "trainer_stage_updates_total",
    "Optimizer updates applied, per subnetwork",
    ["stage"],
)

STAGES_SKIPPED = Counter(
    "trainer_stages_skipped_total",
    "Update stages skipped because their objective has no active term",
    ["stage"],
)

MIXED_TENSORS_BUILT = Counter(
    "trainer_mixed_tensors_built_total",
    "Mixed batches constructed",
    ["level"],
)

NONFINITE_ABORTS = Counter(
    "trainer_nonfinite_aborts_total",
    "Runs aborted on a non-finite loss term",
    ["term"],
)

EPOCH_TARGET_ACCURACY = Gauge(
    "trainer_epoch_target_accuracy",
    "Target-domain accuracy at the end of the latest epoch",
)

EPOCH_A_DISTANCE = Gauge(
    "trainer_epoch_a_distance",
    "Proxy A-distance at the end of the latest epoch",
)

CHECKPOINTS_WRITTEN = Counter(
    "trainer_checkpoints_written_total",
    "Checkpoint files written",
)
