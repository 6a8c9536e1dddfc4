"""Desk-scale domain pairs: rotated two-moons, inverted 8x8 digits, shifted IDX digits."""

from __future__ import annotations

import numpy as np
from sklearn.datasets import load_digits, make_moons

from services.data.datasets import DomainPair, LabeledDataset
from services.data.sampling import protocol_subsample
from services.data.transforms import MAX_ROTATION_DEGREES, apply_shifts, parse_shifts
from shared.errors import DatasetError
from shared.logging_config import get_logger

logger = get_logger(__name__)

# Centre of the two-moons layout; rotation and the unit-square map pivot here.
MOONS_CENTER = np.array([0.5, 0.25])
MOONS_SCALE = 4.0


def moons_to_unit(points: np.ndarray) -> np.ndarray:
    return 0.5 + (points - MOONS_CENTER) / MOONS_SCALE


def unit_to_moons(points: np.ndarray) -> np.ndarray:
    return (points - 0.5) * MOONS_SCALE + MOONS_CENTER


def rotate_points(points: np.ndarray, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return (points - MOONS_CENTER) @ rotation.T + MOONS_CENTER


def _moons(n: int, noise: float, seed: int, degrees: float, name: str) -> LabeledDataset:
    points, labels = make_moons(n_samples=n, noise=noise, random_state=seed)
    if degrees:
        points = rotate_points(points, degrees)
    return LabeledDataset(
        images=np.clip(moons_to_unit(points), 0.0, 1.0),
        labels=labels,
        name=name,
        image_shape=(1, 2),
        num_classes=2,
    )


def make_moons_pair(n: int, noise: float = 0.1, shift: float = 30.0, seed: int = 0) -> DomainPair:
    """Two interleaved half circles; the target is the source rotated by ``shift`` degrees.

    Both domains have ``n`` points and are drawn with independent seeds. Points
    are mapped into the unit square so they share the [0, 1] pixel contract.
    """
    if n < 2 or n % 2:
        raise DatasetError(f"moons needs an even n >= 2, got {n}")
    if abs(shift) > MAX_ROTATION_DEGREES:
        raise DatasetError(f"moons shift {shift} outside [-45, 45] degrees")
    source_seed, target_seed = np.random.SeedSequence(seed).generate_state(2)
    return DomainPair(
        source=_moons(n, noise, int(source_seed), 0.0, "moons-source"),
        target=_moons(n, noise, int(target_seed), shift, f"moons-target-{shift:g}"),
    )


def _split_halves(ds: LabeledDataset, rng: np.random.Generator) -> tuple[LabeledDataset, ...]:
    order = rng.permutation(len(ds))
    half = len(ds) // 2
    return ds.subset(order[:half]), ds.subset(order[half:])


def make_shifted_pair(
    ds: LabeledDataset,
    shifts: str,
    seed: int = 0,
    n_source: int | None = None,
    n_target: int | None = None,
) -> DomainPair:
    """Split ``ds`` into disjoint halves and apply ``shifts`` to the target half."""
    rng = np.random.default_rng(seed)
    source, target = _split_halves(ds, rng)
    target = apply_shifts(target, parse_shifts(shifts), rng)
    pair = DomainPair(
        source=LabeledDataset(
            images=source.images,
            labels=source.labels,
            name=f"{ds.name}-source",
            image_shape=source.image_shape,
            num_classes=source.num_classes,
        ),
        target=target,
    )
    if n_source is not None or n_target is not None:
        pair = protocol_subsample(
            pair, n_source or len(pair.source), n_target or len(pair.target), rng
        )
    logger.info(
        "shifted_pair_built",
        name=ds.name,
        shifts=shifts,
        source=len(pair.source),
        target=len(pair.target),
    )
    return pair


def make_digits_pair(shift: str = "invert", seed: int = 0) -> DomainPair:
    """8x8 digits bundled with scikit-learn; the target half carries ``shift``."""
    digits = load_digits()
    ds = LabeledDataset(
        images=digits.data / 16.0,
        labels=digits.target,
        name="digits8",
        image_shape=(8, 8),
        num_classes=10,
    )
    return make_shifted_pair(ds, shift, seed)
