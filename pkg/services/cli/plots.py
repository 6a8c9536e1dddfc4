"""SVG figures for training curves and omega/phi sensitivity sweeps.

Figures are built on ``matplotlib.figure.Figure`` directly, without pyplot
state. Every plotted line carries a ``gid`` so the SVG groups can be located
by id.
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import pandas as pd
from matplotlib.figure import Figure

from services.trainer.losses import LOSS_TERMS
from services.trainer.run_dir import RunDirectory, read_metrics
from shared.errors import ConfigError, MalformedInputError
from shared.logging_config import get_logger
from shared.schemas import RunConfig

logger = get_logger(__name__)

LOSSES_NAME = "losses.svg"
ACCURACY_NAME = "accuracy.svg"
SENSITIVITY_NAME = "sensitivity.svg"
SENSITIVITY_COLUMNS = ("parameter", "value", "accuracy")
_SVG_METADATA = {"Date": None}


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    return path


def loss_figure(metrics: pd.DataFrame) -> Figure:
    fig = Figure(figsize=(8, 5))
    ax = fig.add_subplot()
    for term in LOSS_TERMS:
        ax.plot(metrics["epoch"], metrics[term], label=term, gid=f"loss-{term}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch-mean loss")
    ax.legend(ncol=3, fontsize="small")
    ax.grid(alpha=0.3)
    return fig


def accuracy_figure(metrics: pd.DataFrame) -> Figure:
    fig = Figure(figsize=(8, 5))
    ax = fig.add_subplot()
    ax.plot(metrics["epoch"], metrics["target_accuracy"], color="C0", gid="target-accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("target accuracy", color="C0")
    ax.set_ylim(0.0, 1.0)
    twin = ax.twinx()
    twin.plot(metrics["epoch"], metrics["a_distance"], color="C1", linestyle="--", gid="a-distance")
    twin.set_ylabel("A-distance", color="C1")
    twin.set_ylim(0.0, 2.0)
    return fig


def sensitivity_figure(frame: pd.DataFrame) -> Figure:
    """One panel per swept parameter: mean accuracy (with std bars) against a log x-axis."""
    parameters = [p for p in ("omega", "phi") if p in set(frame["parameter"])]
    fig = Figure(figsize=(5 * len(parameters), 4))
    for i, parameter in enumerate(parameters, start=1):
        ax = fig.add_subplot(1, len(parameters), i)
        stats = (
            frame[frame["parameter"] == parameter]
            .groupby("value")["accuracy"]
            .agg(["mean", lambda s: s.std(ddof=0)])
            .sort_index()
        )
        stats.columns = ["mean", "std"]
        ax.errorbar(
            stats.index, stats["mean"], yerr=stats["std"], marker="o", capsize=3,
            gid=f"sensitivity-{parameter}",
        )
        ax.set_xscale("log")
        ax.set_xlabel(parameter)
        ax.set_ylabel("target accuracy")
        ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    return fig


def plot_run(run_path: Path, out_dir: Path | None = None) -> list[Path]:
    """Write losses.svg and accuracy.svg for one run directory."""
    metrics = read_metrics(run_path)
    out_dir = out_dir or Path(run_path)
    paths = [
        _save(loss_figure(metrics), out_dir / LOSSES_NAME),
        _save(accuracy_figure(metrics), out_dir / ACCURACY_NAME),
    ]
    logger.info("plots_written", run=str(run_path), files=[p.name for p in paths])
    return paths


def read_sensitivity_csv(path: Path) -> pd.DataFrame:
    if not Path(path).exists():
        raise MalformedInputError(f"{path}: sensitivity file not found")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise MalformedInputError(f"{path}: cannot parse sensitivity table ({exc})") from exc
    missing = [c for c in SENSITIVITY_COLUMNS if c not in frame.columns]
    if missing or frame.empty:
        raise MalformedInputError(f"{path}: expected rows with columns {list(SENSITIVITY_COLUMNS)}")
    return frame


def sensitivity_frame_from_runs(run_paths: Sequence[Path]) -> pd.DataFrame:
    """Classify each run by which of omega/phi departs from the default.

    A run at the defaults anchors both panels; runs changing both are ignored.
    """
    defaults = RunConfig()
    rows = []
    for run_path in run_paths:
        run = RunDirectory(run_path)
        try:
            cfg = run.load_config()
        except ConfigError as exc:
            raise MalformedInputError(f"{run_path}: unreadable config snapshot") from exc
        accuracy = float(read_metrics(run_path)["target_accuracy"].iloc[-1])
        changed = {
            name: getattr(cfg, name)
            for name in ("omega", "phi")
            if getattr(cfg, name) != getattr(defaults, name)
        }
        if len(changed) == 2:
            logger.warning(
                "sensitivity_run_skipped", run=str(run_path), reason="omega and phi both changed"
            )
            continue
        swept = changed or {"omega": cfg.omega, "phi": cfg.phi}
        for name, value in swept.items():
            rows.append({"parameter": name, "value": value, "seed": cfg.seed, "accuracy": accuracy})
    if not rows:
        raise MalformedInputError("no run directory varies omega or phi alone")
    return pd.DataFrame(rows)


def plot_sensitivity(sources: Sequence[Path], out_dir: Path) -> Path:
    """Grouped sensitivity figure from a sensitivity.csv or several run directories."""
    if len(sources) == 1 and Path(sources[0]).is_file():
        frame = read_sensitivity_csv(sources[0])
    else:
        frame = sensitivity_frame_from_runs(sources)
    path = _save(sensitivity_figure(frame), out_dir / SENSITIVITY_NAME)
    logger.info("plots_written", files=[path.name], points=len(frame))
    return path
