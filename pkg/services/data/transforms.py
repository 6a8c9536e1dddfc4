"""Synthetic domain shifts applied to image datasets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

from services.data.datasets import LabeledDataset
from shared.errors import DatasetError

ShiftKind = Literal["invert", "rotate", "gaussian_noise", "intensity_scale"]

MAX_ROTATION_DEGREES = 45.0
MAX_INTENSITY_SCALE = 2.0

_ALIASES: dict[str, ShiftKind] = {
    "invert": "invert",
    "rotate": "rotate",
    "noise": "gaussian_noise",
    "gaussian_noise": "gaussian_noise",
    "scale": "intensity_scale",
    "intensity_scale": "intensity_scale",
}


@dataclass(frozen=True)
class Shift:
    kind: ShiftKind
    value: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "rotate" and abs(self.value) > MAX_ROTATION_DEGREES:
            raise DatasetError(f"rotation {self.value} outside [-45, 45] degrees")
        if self.kind == "gaussian_noise" and self.value < 0:
            raise DatasetError(f"noise level must be >= 0, got {self.value}")
        if self.kind == "intensity_scale" and not 0 < self.value <= MAX_INTENSITY_SCALE:
            raise DatasetError(f"intensity scale {self.value} outside (0, 2]")

    def label(self) -> str:
        return self.kind if self.kind == "invert" else f"{self.kind}:{self.value:g}"


def parse_shifts(text: str) -> list[Shift]:
    """Parse ``"rotate:25+noise:0.05"`` style descriptions; ``""``/``"none"`` means no shift."""
    if text.strip().lower() in {"", "none"}:
        return []
    shifts: list[Shift] = []
    for part in text.split("+"):
        name, _, raw = part.strip().partition(":")
        kind = _ALIASES.get(name.strip().lower())
        if kind is None:
            raise DatasetError(f"unknown shift '{name}' in '{text}'")
        if kind == "invert":
            if raw:
                raise DatasetError("invert takes no parameter")
            shifts.append(Shift("invert"))
            continue
        try:
            value = float(raw)
        except ValueError as exc:
            raise DatasetError(f"shift '{part}' needs a numeric parameter") from exc
        shifts.append(Shift(kind, value))
    return shifts


def _rotate(images: np.ndarray, shape: tuple[int, int], degrees: float) -> np.ndarray:
    if degrees == 0:
        return images.copy()
    stack = images.reshape(-1, *shape)
    turned = ndimage.rotate(
        stack, degrees, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0
    )
    return turned.reshape(images.shape)


def synth_shift(ds: LabeledDataset, shift: Shift, rng: np.random.Generator) -> LabeledDataset:
    """Apply one shift; labels pass through and pixels are clamped to [0, 1]."""
    x = ds.images
    if shift.kind == "invert":
        out = 1.0 - x
    elif shift.kind == "rotate":
        out = _rotate(x, ds.image_shape, shift.value)
    elif shift.kind == "gaussian_noise":
        out = x + rng.normal(0.0, shift.value, x.shape) if shift.value > 0 else x.copy()
    else:
        out = x * shift.value
    return LabeledDataset(
        images=np.clip(out, 0.0, 1.0),
        labels=ds.labels,
        name=f"{ds.name}+{shift.label()}",
        image_shape=ds.image_shape,
        num_classes=ds.num_classes,
    )


def apply_shifts(
    ds: LabeledDataset, shifts: list[Shift], rng: np.random.Generator
) -> LabeledDataset:
    for shift in shifts:
        ds = synth_shift(ds, shift, rng)
    return ds


def block_downsample(ds: LabeledDataset, factor: int, pad_to: int | None = None) -> LabeledDataset:
    """Zero-pad square images to ``pad_to`` then average ``factor x factor`` blocks."""
    rows, cols = ds.image_shape
    if factor < 1:
        raise DatasetError(f"downsample factor must be >= 1, got {factor}")
    stack = ds.images.reshape(-1, rows, cols)
    if pad_to is not None:
        if pad_to < rows or pad_to < cols:
            raise DatasetError(f"cannot pad {rows}x{cols} images to {pad_to}")
        top, left = (pad_to - rows) // 2, (pad_to - cols) // 2
        stack = np.pad(stack, ((0, 0), (top, pad_to - rows - top), (left, pad_to - cols - left)))
        rows = cols = pad_to
    if rows % factor or cols % factor:
        raise DatasetError(f"{rows}x{cols} images do not split into {factor}x{factor} blocks")
    small = stack.reshape(-1, rows // factor, factor, cols // factor, factor).mean(axis=(2, 4))
    return LabeledDataset(
        images=small.reshape(small.shape[0], -1),
        labels=ds.labels,
        name=ds.name,
        image_shape=(rows // factor, cols // factor),
        num_classes=ds.num_classes,
    )
