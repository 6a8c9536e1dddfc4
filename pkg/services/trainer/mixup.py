"""Pixel- and feature-level domain mixup and the label blocks derived from it.

A mixup ratio is either one float for the whole batch (the default) or a
vector with one entry per row when per-sample mixing is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike

from shared.errors import DimensionError, DomainError
from shared.tensor_core import FloatArray, Tensor

BlockKind = Literal["source", "target", "mixup"]
RoleTag = Literal["m", "s", "t"]
Ratio = float | FloatArray


@dataclass(frozen=True)
class MixupBatch:
    x_s: FloatArray
    x_t: FloatArray
    x_m: FloatArray
    lam: Ratio
    l_dom_m: Ratio
    y_s: np.ndarray


@dataclass(frozen=True)
class ClassLabelBlock:
    l_cls: FloatArray
    l_comp: float


@dataclass(frozen=True)
class ClassLabelBatch:
    """Row-stacked label blocks fed to the decoder."""

    l_cls: FloatArray
    l_comp: FloatArray

    def matrix(self) -> FloatArray:
        return np.hstack([self.l_cls, self.l_comp[:, None]])

    def __len__(self) -> int:
        return self.l_cls.shape[0]


def _check_ratio(lam: ArrayLike) -> np.ndarray:
    arr = np.asarray(lam, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise DomainError(f"mixup ratio must lie in [0, 1], got {lam}")
    return arr


def sample_lambda(alpha: float, rng: np.random.Generator, size: int | None = None) -> Ratio:
    """Draw from Beta(alpha, alpha) as X / (X + Y) with X, Y ~ Gamma(alpha, 1)."""
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    x = rng.gamma(alpha, 1.0, size)
    y = rng.gamma(alpha, 1.0, size)
    lam = x / (x + y)
    return float(lam) if size is None else np.asarray(lam, dtype=np.float64)


def _row_weights(lam: np.ndarray, shape: tuple[int, ...]) -> FloatArray | float:
    if lam.ndim == 0:
        return float(lam)
    if lam.shape[0] != shape[0]:
        raise DimensionError(f"per-row ratios {lam.shape} do not match batch {shape}")
    return np.broadcast_to(lam.reshape(-1, *([1] * (len(shape) - 1))), shape).copy()


def pixel_mixup(x_s: FloatArray, x_t: FloatArray, lam: Ratio) -> tuple[FloatArray, Ratio]:
    """``x_m = lam * x_s + (1 - lam) * x_t``; the soft domain label is ``lam``."""
    if x_s.shape != x_t.shape:
        raise DimensionError(f"pixel_mixup: source {x_s.shape} and target {x_t.shape} differ")
    arr = _check_ratio(lam)
    w = _row_weights(arr, x_s.shape)
    x_m = w * x_s + (1.0 - w) * x_t
    return x_m, (float(arr) if arr.ndim == 0 else arr.copy())


def make_mixup_batch(
    x_s: FloatArray, y_s: np.ndarray, x_t: FloatArray, lam: Ratio
) -> MixupBatch:
    x_m, l_dom_m = pixel_mixup(x_s, x_t, lam)
    return MixupBatch(x_s=x_s, x_t=x_t, x_m=x_m, lam=l_dom_m, l_dom_m=l_dom_m, y_s=y_s)


def _mix(a: Tensor, b: Tensor, lam: np.ndarray) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"feature_mixup: shapes {a.shape} and {b.shape} differ")
    w = _row_weights(lam, a.shape)
    if isinstance(w, float):
        return a * w + b * (1.0 - w)
    return a * Tensor(w) + b * Tensor(1.0 - w)


def feature_mixup(
    mu_s: Tensor, sigma_s: Tensor, mu_t: Tensor, sigma_t: Tensor, lam: Ratio
) -> tuple[Tensor, Tensor]:
    """Convex combination of two latent codes with the iteration's pixel-level ratio."""
    arr = _check_ratio(lam)
    return _mix(mu_s, mu_t, arr), _mix(sigma_s, sigma_t, arr)


def build_class_block(
    kind: BlockKind, num_classes: int, y_s: int | None = None, lam: float | None = None
) -> ClassLabelBlock:
    l_cls = np.zeros(num_classes)
    if kind == "target":
        return ClassLabelBlock(l_cls=l_cls, l_comp=1.0)
    if y_s is None:
        raise DomainError(f"{kind} label block needs a source class index")
    if not 0 <= y_s < num_classes:
        raise DomainError(f"class index {y_s} outside [0, {num_classes})")
    if kind == "source":
        l_cls[y_s] = 1.0
        return ClassLabelBlock(l_cls=l_cls, l_comp=0.0)
    if kind == "mixup":
        if lam is None:
            raise DomainError("mixup label block needs a mixup ratio")
        ratio = float(_check_ratio(lam))
        l_cls[y_s] = ratio
        return ClassLabelBlock(l_cls=l_cls, l_comp=1.0 - ratio)
    raise DomainError(f"unknown label block kind '{kind}'")


def class_label_batch(
    kind: BlockKind,
    num_classes: int,
    batch: int,
    y_s: ArrayLike | None = None,
    lam: Ratio | None = None,
) -> ClassLabelBatch:
    """Stack one label block per row; ``lam`` may be scalar or per-row."""
    if kind == "target":
        return ClassLabelBatch(l_cls=np.zeros((batch, num_classes)), l_comp=np.ones(batch))
    if y_s is None:
        raise DomainError(f"{kind} label blocks need source class indices")
    labels = np.asarray(y_s, dtype=np.int64)
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise DomainError(f"class indices must lie in [0, {num_classes})")
    rows = np.arange(batch)
    l_cls = np.zeros((batch, num_classes))
    if kind == "source":
        l_cls[rows, labels] = 1.0
        return ClassLabelBatch(l_cls=l_cls, l_comp=np.zeros(batch))
    if lam is None:
        raise DomainError("mixup label blocks need a mixup ratio")
    ratio = np.broadcast_to(_check_ratio(lam), (batch,)).astype(np.float64)
    l_cls[rows, labels] = ratio
    return ClassLabelBatch(l_cls=l_cls, l_comp=1.0 - ratio)


def triplet_roles(lam: float) -> tuple[RoleTag, RoleTag, RoleTag, float]:
    """Anchor is always the mixed sample; the positive is the dominant domain."""
    ratio = float(_check_ratio(lam))
    margin = abs(2.0 * ratio - 1.0)
    if ratio >= 0.5:
        return "m", "s", "t", margin
    return "m", "t", "s", margin


def triplet_masks(lam: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Per-row form of ``triplet_roles``: (positive-is-source indicator, margin)."""
    ratio = _check_ratio(lam)
    return (ratio >= 0.5).astype(np.float64), np.abs(2.0 * ratio - 1.0)
