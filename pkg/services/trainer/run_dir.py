"""On-disk layout of one training run.

::

    <run>/config.snapshot.cfg   resolved RunConfig
    <run>/metrics.csv           one MetricsRecord per epoch
    <run>/metrics.prom          Prometheus text snapshot
    <run>/checkpoints/          epoch-NNNN.ckpt every k epochs, last.ckpt every epoch
    <run>/summary.json          RunSummary, written when the run finishes
"""

from __future__ import annotations

from pathlib import Path

import pandas as pd
from prometheus_client import REGISTRY, write_to_textfile

from services.trainer.checkpoint import save_checkpoint
from services.trainer.metrics import CHECKPOINTS_WRITTEN
from services.trainer.networks import ModelSet
from shared.config_file import dump_run_config, load_run_config
from shared.errors import MalformedInputError
from shared.logging_config import get_logger
from shared.schemas import METRICS_COLUMNS, MetricsRecord, RunConfig, RunSummary

logger = get_logger(__name__)

SNAPSHOT_NAME = "config.snapshot.cfg"
METRICS_NAME = "metrics.csv"
PROM_NAME = "metrics.prom"
SUMMARY_NAME = "summary.json"
LAST_CHECKPOINT = "last.ckpt"


class RunDirectory:
    def __init__(self, path: Path) -> None:
        self.path = Path(path)

    @classmethod
    def create(cls, path: Path, cfg: RunConfig) -> RunDirectory:
        run = cls(path)
        run.checkpoints.mkdir(parents=True, exist_ok=True)
        run.metrics_path.unlink(missing_ok=True)
        (run.path / SNAPSHOT_NAME).write_text(dump_run_config(cfg))
        logger.info("run_directory_created", path=str(run.path))
        return run

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    @property
    def metrics_path(self) -> Path:
        return self.path / METRICS_NAME

    @property
    def last_checkpoint(self) -> Path:
        return self.checkpoints / LAST_CHECKPOINT

    def load_config(self) -> RunConfig:
        return load_run_config(self.path / SNAPSHOT_NAME)

    def record_epoch(self, models: ModelSet, record: MetricsRecord, checkpoint_every: int) -> None:
        row = pd.DataFrame([record.model_dump()], columns=METRICS_COLUMNS)
        row.to_csv(
            self.metrics_path, mode="a", header=not self.metrics_path.exists(), index=False
        )
        save_checkpoint(models, self.last_checkpoint)
        CHECKPOINTS_WRITTEN.inc()
        if checkpoint_every and record.epoch % checkpoint_every == 0:
            path = save_checkpoint(models, self.checkpoints / f"epoch-{record.epoch:04d}.ckpt")
            CHECKPOINTS_WRITTEN.inc()
            logger.info("checkpoint_written", path=str(path), epoch=record.epoch)
        write_to_textfile(str(self.path / PROM_NAME), REGISTRY)

    def write_summary(self, records: list[MetricsRecord], seed: int) -> RunSummary:
        best = max(records, key=lambda r: r.target_accuracy)
        summary = RunSummary(
            seed=seed,
            epochs=len(records),
            final_accuracy=records[-1].target_accuracy,
            best_accuracy=best.target_accuracy,
            best_epoch=best.epoch,
            final_a_distance=records[-1].a_distance,
            checkpoint=str(self.last_checkpoint.relative_to(self.path)),
        )
        (self.path / SUMMARY_NAME).write_text(summary.model_dump_json(indent=2) + "\n")
        return summary

    def load_summary(self) -> RunSummary:
        return RunSummary.model_validate_json((self.path / SUMMARY_NAME).read_text())


def read_metrics(path: Path) -> pd.DataFrame:
    """Load a metrics.csv (or the one inside a run directory) and validate its header."""
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_NAME
    if not path.exists():
        raise MalformedInputError(f"{path}: metrics file not found")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise MalformedInputError(f"{path}: cannot parse metrics ({exc})") from exc
    missing = [c for c in METRICS_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedInputError(f"{path}: missing columns {missing}")
    if frame.empty:
        raise MalformedInputError(f"{path}: no metric rows")
    return frame
