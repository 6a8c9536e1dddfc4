"""Ablation grid and omega/phi sensitivity sweeps over independent training runs."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, TypeVar

import pandas as pd

from services.data.tasks import build_domain_pair
from services.evaluator.metrics import ABLATION_CELLS
from services.trainer.trainer import train
from shared.logging_config import get_logger
from shared.schemas import (
    AblationCell,
    AblationRow,
    AblationSpec,
    RunConfig,
    SensitivityCell,
    Toggles,
)

logger = get_logger(__name__)

T = TypeVar("T")

CELLS_NAME = "ablation_cells.csv"
TABLE_NAME = "ablation_table.csv"
SENSITIVITY_NAME = "sensitivity.csv"
DEFAULT_SEEDS = (0, 1, 2)
OMEGA_GRID = (0.05, 0.1, 0.2)
PHI_GRID = (0.005, 0.01, 0.02)


def table4_spec(seeds: Sequence[int] = DEFAULT_SEEDS, task: str = "moons") -> AblationSpec:
    """Pixel mixup / feature mixup / triplet grid with D_cls and pseudo labels on."""
    grid = [
        (False, False, False),
        (True, False, False),
        (True, False, True),
        (False, True, False),
        (True, True, False),
        (True, True, True),
    ]
    return AblationSpec(
        combinations=[
            Toggles(pixel_mixup=pm, feature_mixup=fm, triplet=tri) for pm, fm, tri in grid
        ],
        seeds=list(seeds),
        task=task,
    )


def table5_spec(seeds: Sequence[int] = DEFAULT_SEEDS, task: str = "moons") -> AblationSpec:
    """D_cls / pseudo-label grid with both mixup levels and the triplet loss on."""
    grid = [(False, False), (True, False), (True, True)]
    return AblationSpec(
        combinations=[Toggles(d_cls_branch=d, pseudo_labels=p) for d, p in grid],
        seeds=list(seeds),
        task=task,
    )


def _run_one(cfg: RunConfig, run_dir: Path | None) -> tuple[float, float]:
    pair = build_domain_pair(cfg.data, cfg.data_seed)
    _, records = train(pair, cfg, run_dir)
    return records[-1].target_accuracy, records[-1].a_distance


def run_cell(
    cfg: RunConfig, toggles: Toggles, seed: int, out_dir: Path | None = None
) -> AblationCell:
    """Train one (combination, seed) cell to completion."""
    cell_cfg = cfg.model_copy(update={"toggles": toggles, "seed": seed})
    label = toggles.label()
    run_dir = out_dir / label / f"seed-{seed}" if out_dir is not None else None
    accuracy, distance = _run_one(cell_cfg, run_dir)
    ABLATION_CELLS.labels(combination=label).inc()
    logger.info(
        "ablation_cell_completed",
        combination=label,
        seed=seed,
        accuracy=accuracy,
        a_distance=distance,
    )
    return AblationCell(combination=label, seed=seed, accuracy=accuracy, a_distance=distance)


def _map(fn: Callable[..., T], jobs: Iterable[tuple[Any, ...]], workers: int) -> list[T]:
    jobs = list(jobs)
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def aggregate_cells(spec: AblationSpec, cells: list[AblationCell]) -> list[AblationRow]:
    """Mean and population std of accuracy, mean A-distance, one row per combination."""
    frame = pd.DataFrame([c.model_dump() for c in cells])
    stats = frame.groupby("combination").agg(
        mean_accuracy=("accuracy", "mean"),
        std_accuracy=("accuracy", lambda s: float(s.std(ddof=0))),
        mean_a_distance=("a_distance", "mean"),
        seeds=("seed", "count"),
    )
    rows = []
    for toggles in spec.combinations:
        label = toggles.label()
        row = stats.loc[label]
        rows.append(
            AblationRow(
                combination=label,
                **toggles.model_dump(),
                mean_accuracy=float(row["mean_accuracy"]),
                std_accuracy=float(row["std_accuracy"]),
                mean_a_distance=float(row["mean_a_distance"]),
                seeds=int(row["seeds"]),
            )
        )
    return rows


def run_ablation(
    spec: AblationSpec, cfg: RunConfig, out_dir: Path | None = None, workers: int = 1
) -> list[AblationRow]:
    """Train every combination for every seed and aggregate the results.

    Cells are independent; with ``workers > 1`` they run in separate processes.
    """
    jobs = [(cfg, toggles, seed, out_dir) for toggles in spec.combinations for seed in spec.seeds]
    logger.info("ablation_started", cells=len(jobs), workers=workers, task=spec.task)
    cells: list[AblationCell] = _map(run_cell, jobs, workers)
    rows = aggregate_cells(spec, cells)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([c.model_dump() for c in cells]).to_csv(out_dir / CELLS_NAME, index=False)
        pd.DataFrame([r.model_dump() for r in rows]).to_csv(out_dir / TABLE_NAME, index=False)
        logger.info("ablation_written", path=str(out_dir))
    return rows


def sensitivity_cell(
    cfg: RunConfig, parameter: str, value: float, seed: int, out_dir: Path | None = None
) -> SensitivityCell:
    cell_cfg = cfg.model_copy(update={parameter: value, "seed": seed})
    run_dir = out_dir / f"{parameter}-{value:g}" / f"seed-{seed}" if out_dir is not None else None
    accuracy, distance = _run_one(cell_cfg, run_dir)
    return SensitivityCell(
        parameter=parameter, value=value, seed=seed, accuracy=accuracy, a_distance=distance
    )


def run_sensitivity(
    omegas: Sequence[float] = OMEGA_GRID,
    phis: Sequence[float] = PHI_GRID,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    cfg: RunConfig | None = None,
    out_dir: Path | None = None,
    workers: int = 1,
) -> list[SensitivityCell]:
    """Vary omega and phi one at a time around ``cfg``."""
    cfg = cfg or RunConfig()
    jobs = [(cfg, "omega", w, s, out_dir) for w in omegas for s in seeds]
    jobs += [(cfg, "phi", p, s, out_dir) for p in phis for s in seeds]
    cells: list[SensitivityCell] = _map(sensitivity_cell, jobs, workers)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame([c.model_dump() for c in cells])
        frame.to_csv(out_dir / SENSITIVITY_NAME, index=False)
    return cells
