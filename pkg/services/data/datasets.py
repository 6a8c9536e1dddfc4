"""In-memory datasets and the source/target pairing used for adaptation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shared.errors import DatasetError


@dataclass(frozen=True)
class LabeledDataset:
    """Images flattened row-major to ``[N x d]`` with pixel values in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray | None
    name: str
    image_shape: tuple[int, int]
    num_classes: int

    def __post_init__(self) -> None:
        images = np.array(self.images, dtype=np.float64)
        if images.ndim != 2:
            raise DatasetError(f"{self.name}: images must be [N x d], got {images.shape}")
        rows, cols = self.image_shape
        if rows * cols != images.shape[1]:
            raise DatasetError(
                f"{self.name}: image shape {self.image_shape} != width {images.shape[1]}"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError(f"{self.name}: pixel values must lie in [0, 1]")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise DatasetError(
                    f"{self.name}: {labels.shape} labels for {images.shape[0]} images"
                )
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError(f"{self.name}: labels must lie in [0, {self.num_classes})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, index: np.ndarray, name: str | None = None) -> LabeledDataset:
        return LabeledDataset(
            images=self.images[index],
            labels=None if self.labels is None else self.labels[index],
            name=name or self.name,
            image_shape=self.image_shape,
            num_classes=self.num_classes,
        )

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DatasetError(f"{self.name}: labels are not available")
        return self.labels


@dataclass(frozen=True)
class UnlabeledDataset:
    images: np.ndarray
    name: str

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class TrainingView:
    """What the trainer is allowed to see: labeled source, unlabeled target."""

    source: LabeledDataset
    target: UnlabeledDataset

    @property
    def num_classes(self) -> int:
        return self.source.num_classes

    @property
    def dim(self) -> int:
        return self.source.dim


@dataclass(frozen=True)
class DomainPair:
    source: LabeledDataset
    target: LabeledDataset

    def __post_init__(self) -> None:
        if self.source.labels is None:
            raise DatasetError("the source domain must be labeled")
        if self.source.dim != self.target.dim:
            raise DatasetError(
                f"feature dimensions differ: source {self.source.dim}, target {self.target.dim}"
            )
        if self.source.num_classes != self.target.num_classes:
            raise DatasetError(
                f"label spaces differ: source K={self.source.num_classes}, "
                f"target K={self.target.num_classes}"
            )

    @property
    def num_classes(self) -> int:
        return self.source.num_classes

    @property
    def dim(self) -> int:
        return self.source.dim

    def training_view(self) -> TrainingView:
        return TrainingView(
            source=self.source,
            target=UnlabeledDataset(images=self.target.images, name=self.target.name),
        )
