"""Resolve a DataConfig into a DomainPair and persist pairs as IDX files plus a manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from services.data.datasets import DomainPair, LabeledDataset
from services.data.idx import load_idx, write_idx
from services.data.sampling import protocol_subsample
from services.data.synthetic import make_digits_pair, make_moons_pair, make_shifted_pair
from services.data.transforms import block_downsample
from shared.errors import DatasetError
from shared.logging_config import get_logger
from shared.schemas import DataConfig, DatasetManifest, TaskKind

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"
PAIR_FILES = {
    "source_images": "source-images.idx",
    "source_labels": "source-labels.idx",
    "target_images": "target-images.idx",
    "target_labels": "target-labels.idx",
}


def moons_shift(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise DatasetError(f"moons shift must be an angle in degrees, got '{text}'") from exc


def build_domain_pair(data: DataConfig, seed: int) -> DomainPair:
    if data.task is TaskKind.MOONS:
        pair = make_moons_pair(data.n, data.noise, moons_shift(data.shift), seed)
    elif data.task is TaskKind.DIGITS:
        pair = make_digits_pair(data.shift, seed)
    elif data.task is TaskKind.IDX:
        ds = load_idx(data.idx_images, data.idx_labels)
        if data.pad_to is not None or data.downsample > 1:
            ds = block_downsample(ds, data.downsample, data.pad_to)
        pair = make_shifted_pair(ds, data.shift, seed)
    else:
        pair = load_manifest_pair(data.manifest)

    if data.n_source is not None or data.n_target is not None:
        rng = np.random.default_rng([seed, 1])
        pair = protocol_subsample(
            pair, data.n_source or len(pair.source), data.n_target or len(pair.target), rng
        )
    logger.info(
        "domain_pair_ready",
        task=data.task.value,
        shift=data.shift,
        source=len(pair.source),
        target=len(pair.target),
        dim=pair.dim,
        num_classes=pair.num_classes,
    )
    return pair


def write_domain_pair(
    pair: DomainPair, out_dir: Path, task: TaskKind, shift: str, seed: int
) -> DatasetManifest:
    """Write the four IDX files and ``manifest.json`` into ``out_dir``."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for domain, ds in (("source", pair.source), ("target", pair.target)):
            write_idx(
                ds,
                out_dir / PAIR_FILES[f"{domain}_images"],
                out_dir / PAIR_FILES[f"{domain}_labels"],
            )
        manifest = DatasetManifest(
            task=task,
            shift=shift,
            seed=seed,
            num_classes=pair.num_classes,
            image_shape=pair.source.image_shape,
            source_size=len(pair.source),
            target_size=len(pair.target),
            files=dict(PAIR_FILES),
        )
        (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    except OSError as exc:
        raise DatasetError(f"{out_dir}: cannot write dataset ({exc.strerror})") from exc
    logger.info(
        "dataset_written",
        path=str(out_dir),
        source=manifest.source_size,
        target=manifest.target_size,
    )
    return manifest


def load_manifest_pair(path: Path) -> DomainPair:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = DatasetManifest.model_validate(json.loads(path.read_text()))
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    except (json.JSONDecodeError, ValidationError) as exc:
        raise DatasetError(f"{path}: invalid manifest ({exc})") from exc
    root = path.parent
    files = manifest.files

    missing = sorted(set(PAIR_FILES) - set(files))
    if missing:
        raise DatasetError(f"{path}: manifest lacks file entries {missing}")

    def load(domain: str) -> LabeledDataset:
        return load_idx(
            root / files[f"{domain}_images"],
            root / files[f"{domain}_labels"],
            name=f"{manifest.task.value}-{domain}",
            num_classes=manifest.num_classes,
        )

    pair = DomainPair(source=load("source"), target=load("target"))
    if len(pair.source) != manifest.source_size or len(pair.target) != manifest.target_size:
        raise DatasetError(f"{path}: domain sizes disagree with the manifest")
    return pair
