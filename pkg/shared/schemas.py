"""Shared Pydantic schemas: run configuration, logged records and ablation specs."""

from __future__ import annotations

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class TaskKind(StrEnum):
    MOONS = "moons"
    DIGITS = "digits"
    IDX = "idx"
    MANIFEST = "manifest"


class Stage(StrEnum):
    """Subnetworks in the order they are updated inside one training step."""

    DISCRIMINATOR = "discriminator"
    DECODER = "decoder"
    CLASSIFIER = "classifier"
    ENCODER = "encoder"


class ProbeKind(StrEnum):
    LOGISTIC = "logistic"
    SVM = "svm"


class Toggles(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    pixel_mixup: bool = True
    feature_mixup: bool = True
    triplet: bool = True
    d_cls_branch: bool = True
    pseudo_labels: bool = True

    @classmethod
    def all_off(cls) -> Toggles:
        return cls(
            pixel_mixup=False,
            feature_mixup=False,
            triplet=False,
            d_cls_branch=False,
            pseudo_labels=False,
        )

    def label(self) -> str:
        """Short name such as ``PM+FM+Tri``; ``baseline`` when everything is off."""
        names = {
            "pixel_mixup": "PM",
            "feature_mixup": "FM",
            "triplet": "Tri",
            "d_cls_branch": "Dcls",
            "pseudo_labels": "pseudo",
        }
        parts = [short for field, short in names.items() if getattr(self, field)]
        return "+".join(parts) if parts else "baseline"


class NetworkWidths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder_hidden: int = Field(default=128, ge=1)
    encoder_layers: int = Field(default=2, ge=1)
    latent_dim: int = Field(default=16, ge=1)
    noise_dim: int = Field(default=16, ge=0)
    decoder_hidden: int = Field(default=128, ge=1)
    decoder_layers: int = Field(default=2, ge=1)
    classifier_hidden: int = Field(default=64, ge=1)
    discriminator_hidden: int = Field(default=128, ge=1)
    discriminator_layers: int = Field(default=2, ge=1)
    feature_dim: int = Field(default=64, ge=1)


class DataConfig(BaseModel):
    """Which domain pair a run trains on."""

    model_config = ConfigDict(extra="forbid")

    task: TaskKind = TaskKind.MOONS
    # moons: rotation in degrees; digits and idx: a chain such as "rotate:25+noise:0.05"
    shift: str = "30"
    n: int = Field(default=1000, ge=2)
    noise: float = Field(default=0.1, ge=0)
    manifest: Path | None = None
    idx_images: Path | None = None
    idx_labels: Path | None = None
    pad_to: int | None = Field(default=32, ge=1)
    downsample: int = Field(default=2, ge=1)
    n_source: int | None = Field(default=None, ge=1)
    n_target: int | None = Field(default=None, ge=1)
    seed: int | None = None

    @model_validator(mode="after")
    def _check_task(self) -> DataConfig:
        if self.task is TaskKind.MOONS and self.n % 2:
            raise ValueError("moons task needs an even number of points")
        if self.task is TaskKind.MANIFEST and self.manifest is None:
            raise ValueError("manifest task needs a manifest path")
        if self.task is TaskKind.IDX and (self.idx_images is None or self.idx_labels is None):
            raise ValueError("idx task needs idx_images and idx_labels")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=2.0, gt=0)
    omega: float = Field(default=0.1, ge=0)
    phi: float = Field(default=0.01, ge=0)
    learning_rate: float = Field(default=4e-4, gt=0)
    encoder_learning_rate: float | None = Field(default=None, gt=0)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    tau_start: float = Field(default=0.9, gt=0, lt=1)
    tau_end: float = Field(default=0.6, gt=0, lt=1)
    saturating_gen: bool = False
    per_sample_lambda: bool = False
    checkpoint_every: int = Field(default=10, ge=0)
    prefetch_batches: int = Field(default=0, ge=0)
    a_distance_max_samples: int = Field(default=1000, ge=20)
    toggles: Toggles = Field(default_factory=Toggles)
    network: NetworkWidths = Field(default_factory=NetworkWidths)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _check_tau(self) -> RunConfig:
        if self.tau_end > self.tau_start:
            raise ValueError("tau_end must not exceed tau_start")
        return self

    def source_only(self) -> RunConfig:
        """Same run with every adaptation mechanism disabled."""
        return self.model_copy(update={"toggles": Toggles.all_off(), "phi": 0.0})

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed


class MetricsRecord(BaseModel):
    """One row of ``metrics.csv``; loss columns are epoch means."""

    epoch: int
    kl: float
    cls_c: float
    adv_s: float
    adv_t: float
    adv_m: float
    soft_m: float
    tri_m: float
    cls_s_g: float
    cls_t_g: float
    target_accuracy: float
    a_distance: float
    pseudo_kept_fraction: float
    wall_time_seconds: float


METRICS_COLUMNS: list[str] = list(MetricsRecord.model_fields)


class RunSummary(BaseModel):
    seed: int
    epochs: int
    final_accuracy: float
    best_accuracy: float
    best_epoch: int
    final_a_distance: float
    checkpoint: str


class DatasetManifest(BaseModel):
    task: TaskKind
    shift: str
    seed: int
    num_classes: int
    image_shape: tuple[int, int]
    source_size: int
    target_size: int
    files: dict[str, str]


class AblationSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    combinations: list[Toggles] = Field(min_length=1)
    seeds: list[int] = Field(min_length=1)
    task: str = "moons"

    @model_validator(mode="after")
    def _distinct(self) -> AblationSpec:
        if len(set(self.combinations)) != len(self.combinations):
            raise ValueError("ablation combinations must be distinct")
        return self


class AblationCell(BaseModel):
    combination: str
    seed: int
    accuracy: float
    a_distance: float


class AblationRow(BaseModel):
    combination: str
    pixel_mixup: bool
    feature_mixup: bool
    triplet: bool
    d_cls_branch: bool
    pseudo_labels: bool
    mean_accuracy: float
    std_accuracy: float
    mean_a_distance: float
    seeds: int


class SensitivityCell(BaseModel):
    parameter: Literal["omega", "phi"]
    value: float
    seed: int
    accuracy: float
    a_distance: float


class EvaluationReport(BaseModel):
    run: str
    target_accuracy: float
    logged_accuracy: float | None
    matches_log: bool
    a_distance: float
    logged_a_distance: float | None = None
