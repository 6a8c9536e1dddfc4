"""Training loop: per-iteration mixup and the four sequential subnetwork updates.

Each iteration updates the discriminator, decoder, classifier and encoder in
that order. Every stage runs its own forward pass against the current
parameters, and only the stage's own subnetwork records gradients.

Sign conventions: the ``adv_*`` terms are log-likelihoods the discriminator
ascends; the decoder and encoder descend ``generator_loss`` on the decoded
images they produce.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import structlog

from services.data.datasets import DomainPair
from services.data.sampling import BatchSampler, RngStreams, TrainingBatch, prefetch
from services.evaluator.evaluate import evaluate_pair, evaluation_indices
from services.trainer.losses import (
    LOSS_TERMS,
    LossBundle,
    adversarial_losses,
    classifier_loss,
    generator_loss,
    kl_loss,
    pseudo_filter,
    soft_domain_loss,
    tau_schedule,
    triplet_loss,
)
from services.trainer.metrics import (
    EPOCH_A_DISTANCE,
    EPOCH_TARGET_ACCURACY,
    MIXED_TENSORS_BUILT,
    NONFINITE_ABORTS,
    STAGE_UPDATES,
    STAGES_SKIPPED,
    STEP_LATENCY,
    TRAIN_STEPS,
)
from services.trainer.mixup import (
    BlockKind,
    Ratio,
    class_label_batch,
    feature_mixup,
    pixel_mixup,
    sample_lambda,
    triplet_masks,
    triplet_roles,
)
from services.trainer.networks import DiscriminatorOutput, LatentCode, ModelSet
from services.trainer.run_dir import RunDirectory
from shared.errors import NonFiniteLossError
from shared.logging_config import get_logger
from shared.schemas import MetricsRecord, RunConfig, Stage
from shared.tensor_core import Tensor, sample_gaussian, take_rows

logger = get_logger(__name__)


@dataclass(frozen=True)
class StepInputs:
    """One iteration's batch, mixup ratio and pseudo-label threshold."""

    batch: TrainingBatch
    lam: Ratio
    tau: float
    x_m: np.ndarray | None = None
    l_dom_m: Ratio | None = None

    @classmethod
    def prepare(cls, batch: TrainingBatch, lam: Ratio, tau: float, cfg: RunConfig) -> StepInputs:
        if not cfg.toggles.pixel_mixup:
            return cls(batch=batch, lam=lam, tau=tau)
        x_m, l_dom_m = pixel_mixup(batch.x_s, batch.x_t, lam)
        MIXED_TENSORS_BUILT.labels(level="pixel").inc()
        return cls(batch=batch, lam=lam, tau=tau, x_m=x_m, l_dom_m=l_dom_m)


@dataclass
class StageObjective:
    loss: Tensor | None
    terms: dict[str, Tensor] = field(default_factory=dict)
    pseudo_kept: int = 0

    @classmethod
    def inactive(cls) -> StageObjective:
        return cls(loss=None)


class StageForward:
    """Forward quantities of one update stage, each computed at most once."""

    def __init__(self, models: ModelSet, step: StepInputs, rng: np.random.Generator) -> None:
        self.models = models
        self.step = step
        self.rng = rng

    def _decode(self, code: LatentCode, kind: BlockKind) -> Tensor:
        rows = len(code)
        block = class_label_batch(
            kind,
            self.models.num_classes,
            rows,
            y_s=None if kind == "target" else self.step.batch.y_s,
            lam=self.step.lam if kind == "mixup" else None,
        )
        z = sample_gaussian((rows, self.models.widths.noise_dim), self.rng)
        return self.models.decoder.decode(code, z, block)

    def _discriminate(self, x: Tensor | np.ndarray) -> DiscriminatorOutput:
        return self.models.discriminator.discriminate(x)

    @cached_property
    def code_s(self) -> LatentCode:
        return self.models.encoder.encode(self.step.batch.x_s)

    @cached_property
    def code_t(self) -> LatentCode:
        return self.models.encoder.encode(self.step.batch.x_t)

    @cached_property
    def code_m(self) -> LatentCode:
        mu, sigma = feature_mixup(
            self.code_s.mu, self.code_s.sigma, self.code_t.mu, self.code_t.sigma, self.step.lam
        )
        MIXED_TENSORS_BUILT.labels(level="feature").inc()
        return LatentCode(mu=mu, sigma=sigma)

    @cached_property
    def logits_s(self) -> Tensor:
        return self.models.classifier.classify(self.code_s)

    @cached_property
    def real_s(self) -> DiscriminatorOutput:
        return self._discriminate(self.step.batch.x_s)

    @cached_property
    def real_t(self) -> DiscriminatorOutput:
        return self._discriminate(self.step.batch.x_t)

    @cached_property
    def mixed(self) -> DiscriminatorOutput:
        return self._discriminate(self.step.x_m)

    @cached_property
    def fake_s(self) -> DiscriminatorOutput:
        return self._discriminate(self._decode(self.code_s, "source"))

    @cached_property
    def fake_t(self) -> DiscriminatorOutput:
        return self._discriminate(self._decode(self.code_t, "target"))

    @cached_property
    def fake_m(self) -> DiscriminatorOutput:
        return self._discriminate(self._decode(self.code_m, "mixup"))


def _mixed_triplet(fwd: StageForward) -> Tensor:
    anchor, f_s, f_t = fwd.mixed.features, fwd.real_s.features, fwd.real_t.features
    lam = np.asarray(fwd.step.lam, dtype=np.float64)
    if lam.ndim == 0:
        _, positive, _, margin = triplet_roles(float(lam))
        if positive == "s":
            return triplet_loss(anchor, f_s, f_t, margin)
        return triplet_loss(anchor, f_t, f_s, margin)
    source_pos, margins = triplet_masks(lam)
    pick = Tensor(np.broadcast_to(source_pos[:, None], f_s.shape).copy())
    other = Tensor(1.0 - pick.data)
    f_p = f_s * pick + f_t * other
    f_n = f_t * pick + f_s * other
    return triplet_loss(anchor, f_p, f_n, margins)


def discriminator_objective(
    models: ModelSet, step: StepInputs, cfg: RunConfig, rng: np.random.Generator
) -> StageObjective:
    """``[d_cls] cls_s_g + omega (soft_m + tri_m) - phi (adv_s + adv_t + adv_m)``.

    The adversarial terms are always reported; with ``phi = 0`` they stay out of
    the objective.
    """
    toggles = cfg.toggles
    adversarial = cfg.phi > 0
    if not (toggles.d_cls_branch or toggles.pixel_mixup or adversarial):
        return StageObjective.inactive()
    fwd = StageForward(models, step, rng)
    terms: dict[str, Tensor] = {}
    loss = Tensor(0.0)
    if toggles.d_cls_branch:
        terms["cls_s_g"] = classifier_loss(fwd.fake_s.cls_logits, step.batch.y_s)
        loss = loss + terms["cls_s_g"]
    if toggles.pixel_mixup:
        terms["soft_m"] = soft_domain_loss(fwd.mixed.dom_score, step.l_dom_m)
        mixed = terms["soft_m"]
        if toggles.triplet:
            terms["tri_m"] = _mixed_triplet(fwd)
            mixed = mixed + terms["tri_m"]
        loss = loss + cfg.omega * mixed
    fake_m = fwd.fake_m.dom_score if toggles.feature_mixup else None
    adv_s, adv_t, adv_m = adversarial_losses(
        fwd.real_s.dom_score, fwd.fake_s.dom_score, fwd.fake_t.dom_score, fake_m
    )
    terms.update(adv_s=adv_s, adv_t=adv_t, adv_m=adv_m)
    if adversarial:
        loss = loss - cfg.phi * (adv_s + adv_t + adv_m)
    return StageObjective(loss=loss, terms=terms)


def decoder_objective(
    models: ModelSet, step: StepInputs, cfg: RunConfig, rng: np.random.Generator
) -> StageObjective:
    """``[d_cls] cls_s_g + phi * generator_loss(D(x^s_g))``."""
    adversarial = cfg.phi > 0
    if not (cfg.toggles.d_cls_branch or adversarial):
        return StageObjective.inactive()
    fwd = StageForward(models, step, rng)
    terms: dict[str, Tensor] = {}
    loss = Tensor(0.0)
    if cfg.toggles.d_cls_branch:
        terms["cls_s_g"] = classifier_loss(fwd.fake_s.cls_logits, step.batch.y_s)
        loss = loss + terms["cls_s_g"]
    if adversarial:
        loss = loss + cfg.phi * generator_loss(fwd.fake_s.dom_score, cfg.saturating_gen)
    return StageObjective(loss=loss, terms=terms)


def classifier_objective(
    models: ModelSet, step: StepInputs, cfg: RunConfig, rng: np.random.Generator
) -> StageObjective:
    fwd = StageForward(models, step, rng)
    cls_c = classifier_loss(fwd.logits_s, step.batch.y_s)
    return StageObjective(loss=cls_c, terms={"cls_c": cls_c})


def encoder_objective(
    models: ModelSet, step: StepInputs, cfg: RunConfig, rng: np.random.Generator
) -> StageObjective:
    """``L_C + omega KL + [d_cls] (cls_s_g + [pseudo] cls_t_g) + phi (gen_t + [FM] gen_m)``."""
    toggles = cfg.toggles
    fwd = StageForward(models, step, rng)
    cls_c = classifier_loss(fwd.logits_s, step.batch.y_s)
    kl = kl_loss(LatentCode.stack([fwd.code_s, fwd.code_t]))
    terms = {"cls_c": cls_c, "kl": kl}
    loss = cls_c + cfg.omega * kl
    kept = 0
    if toggles.d_cls_branch:
        terms["cls_s_g"] = classifier_loss(fwd.fake_s.cls_logits, step.batch.y_s)
        loss = loss + terms["cls_s_g"]
        if toggles.pseudo_labels:
            keep, labels = pseudo_filter(models.classifier.classify(fwd.code_t), step.tau)
            kept = int(keep.size)
            if kept:
                terms["cls_t_g"] = classifier_loss(take_rows(fwd.fake_t.cls_logits, keep), labels)
                loss = loss + terms["cls_t_g"]
    if cfg.phi > 0:
        generator = generator_loss(fwd.fake_t.dom_score, cfg.saturating_gen)
        if toggles.feature_mixup:
            generator = generator + generator_loss(fwd.fake_m.dom_score, cfg.saturating_gen)
        loss = loss + cfg.phi * generator
    return StageObjective(loss=loss, terms=terms, pseudo_kept=kept)


ObjectiveFn = Callable[[ModelSet, StepInputs, RunConfig, np.random.Generator], StageObjective]

STAGE_OBJECTIVES: dict[Stage, ObjectiveFn] = {
    Stage.DISCRIMINATOR: discriminator_objective,
    Stage.DECODER: decoder_objective,
    Stage.CLASSIFIER: classifier_objective,
    Stage.ENCODER: encoder_objective,
}

# Which stage's value of a shared term lands in the LossBundle.
_REPORTED_BY: dict[str, Stage] = {
    "adv_s": Stage.DISCRIMINATOR,
    "adv_t": Stage.DISCRIMINATOR,
    "adv_m": Stage.DISCRIMINATOR,
    "soft_m": Stage.DISCRIMINATOR,
    "tri_m": Stage.DISCRIMINATOR,
    "cls_s_g": Stage.DECODER,
    "cls_c": Stage.CLASSIFIER,
    "kl": Stage.ENCODER,
    "cls_t_g": Stage.ENCODER,
}


def _check_terms(stage: Stage, objective: StageObjective) -> None:
    for name, value in objective.terms.items():
        scalar = value.item()
        if not np.isfinite(scalar):
            NONFINITE_ABORTS.labels(term=name).inc()
            logger.error("nonfinite_loss", stage=stage.value, term=name, value=scalar)
            raise NonFiniteLossError(name, scalar)
    total = objective.loss.item() if objective.loss is not None else 0.0
    if not np.isfinite(total):
        term = f"{stage.value}_objective"
        NONFINITE_ABORTS.labels(term=term).inc()
        logger.error("nonfinite_loss", stage=stage.value, term=term, value=total)
        raise NonFiniteLossError(term, total)


def train_step(
    models: ModelSet,
    batch: TrainingBatch,
    lam: Ratio,
    tau: float,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> LossBundle:
    """Run the discriminator, decoder, classifier and encoder updates in turn."""
    started = time.perf_counter()
    step = StepInputs.prepare(batch, lam, tau, cfg)
    bundle = LossBundle()
    for stage, objective_fn in STAGE_OBJECTIVES.items():
        with models.trainable(stage) as net:
            objective = objective_fn(models, step, cfg, rng)
            if objective.loss is None or not objective.loss.requires_grad:
                STAGES_SKIPPED.labels(stage=stage.value).inc()
                continue
            _check_terms(stage, objective)
            objective.loss.backward()
            net.step()
        STAGE_UPDATES.labels(stage=stage.value).inc()
        for name, value in objective.terms.items():
            if _REPORTED_BY[name] is stage:
                setattr(bundle, name, value.detach())
        if stage is Stage.ENCODER:
            bundle.pseudo_kept = objective.pseudo_kept
    TRAIN_STEPS.inc()
    STEP_LATENCY.observe(time.perf_counter() - started)
    return bundle


def train(
    pair: DomainPair, cfg: RunConfig, run_dir: Path | RunDirectory | None = None
) -> tuple[ModelSet, list[MetricsRecord]]:
    """Train for ``cfg.epochs`` passes over the source domain.

    Only the label-free training view of ``pair`` reaches the sampler; target
    labels are used for the per-epoch accuracy and nothing else.
    """
    run = RunDirectory.create(Path(run_dir), cfg) if isinstance(run_dir, str | Path) else run_dir
    streams = RngStreams.from_seed(cfg.seed)
    view = pair.training_view()
    models = ModelSet.build(
        view.dim,
        view.num_classes,
        cfg.network,
        streams.init,
        learning_rate=cfg.learning_rate,
        encoder_learning_rate=cfg.encoder_learning_rate,
    )
    sampler = BatchSampler(view, cfg.batch_size, streams.data)
    index_s, index_t = evaluation_indices(pair, cfg.a_distance_max_samples, streams.eval)
    lambda_size = cfg.batch_size if cfg.per_sample_lambda else None

    structlog.contextvars.bind_contextvars(seed=cfg.seed, run=cfg.toggles.label())
    logger.info(
        "training_started",
        epochs=cfg.epochs,
        iterations_per_epoch=sampler.iterations_per_epoch,
        source=len(pair.source),
        target=len(pair.target),
    )
    records: list[MetricsRecord] = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            tau = tau_schedule(epoch - 1, cfg.epochs, cfg.tau_start, cfg.tau_end)
            sums = dict.fromkeys(LOSS_TERMS, 0.0)
            kept = iterations = 0
            for batch in prefetch(sampler.epoch(), cfg.prefetch_batches):
                lam = sample_lambda(cfg.alpha, streams.train, lambda_size)
                bundle = train_step(models, batch, lam, tau, cfg, streams.train)
                for name, value in bundle.scalars().items():
                    sums[name] += value
                kept += bundle.pseudo_kept
                iterations += 1
            accuracy, distance = evaluate_pair(models, pair, index_s, index_t, cfg.seed)
            record = MetricsRecord(
                epoch=epoch,
                **{name: total / iterations for name, total in sums.items()},
                target_accuracy=accuracy,
                a_distance=distance,
                pseudo_kept_fraction=kept / (iterations * cfg.batch_size),
                wall_time_seconds=time.perf_counter() - started,
            )
            records.append(record)
            EPOCH_TARGET_ACCURACY.set(accuracy)
            EPOCH_A_DISTANCE.set(distance)
            logger.info(
                "epoch_completed",
                epoch=epoch,
                tau=round(tau, 4),
                cls_c=round(record.cls_c, 5),
                target_accuracy=round(accuracy, 4),
                a_distance=round(distance, 4),
            )
            if run is not None:
                run.record_epoch(models, record, cfg.checkpoint_every)
        if run is not None:
            summary = run.write_summary(records, cfg.seed)
            logger.info("training_finished", path=str(run.path), **summary.model_dump())
    finally:
        structlog.contextvars.unbind_contextvars("seed", "run")
    return models, records


def source_only_baseline(
    pair: DomainPair, cfg: RunConfig, run_dir: Path | RunDirectory | None = None
) -> tuple[ModelSet, MetricsRecord]:
    """Encoder and classifier trained on ``L_C + omega KL`` alone, with the same seeds."""
    models, records = train(pair, cfg.source_only(), run_dir)
    return models, records[-1]
