"""Target accuracy, proxy A-distance, feature/sample export and run re-evaluation."""

from __future__ import annotations

import time
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from sklearn.svm import LinearSVC

from services.data.datasets import DomainPair, LabeledDataset
from services.data.idx import write_idx
from services.data.sampling import RngStreams
from services.data.tasks import build_domain_pair
from services.evaluator.metrics import A_DISTANCE_LATENCY
from services.trainer.checkpoint import load_checkpoint
from services.trainer.mixup import class_label_batch
from services.trainer.networks import ModelSet
from services.trainer.run_dir import RunDirectory
from shared.errors import DatasetError, DimensionError
from shared.logging_config import get_logger
from shared.schemas import EvaluationReport, ProbeKind, RunConfig
from shared.tensor_core import Tensor, matmul, repeat_rows, sample_gaussian, softplus

logger = get_logger(__name__)

MIN_A_DISTANCE_SAMPLES = 20
PROBE_STEPS = 500
PROBE_LEARNING_RATE = 0.1
PROBE_L2 = 1e-3


def predict_logits(models: ModelSet, images: ArrayLike) -> np.ndarray:
    with models.frozen():
        return models.classifier.classify(models.encoder.encode(images)).numpy()


def domain_features(models: ModelSet, images: ArrayLike) -> np.ndarray:
    """Concatenated ``[mu, sigma]`` codes, the representation the classifier reads."""
    with models.frozen():
        return models.encoder.encode(images).features().numpy()


def _accuracy(logits: np.ndarray, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise DatasetError(f"{ds.name}: cannot score an empty dataset")
    labels = ds.require_labels()
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def target_accuracy(models: ModelSet, target_test: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if len(target_test) == 0:
        raise DatasetError(f"{target_test.name}: cannot score an empty dataset")
    return _accuracy(predict_logits(models, target_test.images), target_test)


def _split_half(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    return order[: n // 2], order[n // 2 :]


def _fit_logistic_probe(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    w = Tensor(np.zeros((x.shape[1], 1)), requires_grad=True)
    b = Tensor(np.zeros((1, 1)), requires_grad=True)
    inputs, targets = Tensor(x), Tensor(y.reshape(-1, 1))
    for _ in range(PROBE_STEPS):
        z = matmul(inputs, w) + repeat_rows(b, x.shape[0])
        loss = (softplus(z) - z * targets).mean() + w.square().sum() * PROBE_L2
        loss.backward()
        w.data -= PROBE_LEARNING_RATE * w.grad_or_zeros()
        b.data -= PROBE_LEARNING_RATE * b.grad_or_zeros()
        w.zero_grad()
        b.zero_grad()
    return w.data[:, 0], float(b.data[0, 0])


def a_distance(
    feat_s: ArrayLike,
    feat_t: ArrayLike,
    seed: int = 0,
    probe: ProbeKind = ProbeKind.LOGISTIC,
) -> float:
    """Proxy A-distance ``2 (1 - 2 eps)`` clamped to [0, 2].

    Each feature set is split 50/50; a linear domain classifier is fitted on the
    train halves and ``eps`` is its error on the test halves.
    """
    xs = np.asarray(feat_s, dtype=np.float64)
    xt = np.asarray(feat_t, dtype=np.float64)
    if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
        raise DimensionError(f"a_distance: feature shapes {xs.shape} and {xt.shape} differ")
    if min(xs.shape[0], xt.shape[0]) < MIN_A_DISTANCE_SAMPLES:
        raise DatasetError(
            f"a_distance needs >= {MIN_A_DISTANCE_SAMPLES} samples per domain, "
            f"got {xs.shape[0]} and {xt.shape[0]}"
        )
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    s_train, s_test = _split_half(xs.shape[0], rng)
    t_train, t_test = _split_half(xt.shape[0], rng)
    x_train = np.vstack([xs[s_train], xt[t_train]])
    y_train = np.concatenate([np.ones(s_train.size), np.zeros(t_train.size)])
    x_test = np.vstack([xs[s_test], xt[t_test]])
    y_test = np.concatenate([np.ones(s_test.size), np.zeros(t_test.size)])

    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std[std == 0] = 1.0
    x_train = (x_train - mean) / std
    x_test = (x_test - mean) / std

    if probe is ProbeKind.SVM:
        svm = LinearSVC(C=1.0, random_state=seed, max_iter=5000)
        predicted = svm.fit(x_train, y_train).predict(x_test)
    else:
        w, b = _fit_logistic_probe(x_train, y_train)
        predicted = (x_test @ w + b > 0).astype(np.float64)
    error = float(np.mean(predicted != y_test))
    A_DISTANCE_LATENCY.observe(time.perf_counter() - started)
    return float(np.clip(2.0 * (1.0 - 2.0 * error), 0.0, 2.0))


def evaluation_indices(
    pair: DomainPair, cap: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Sorted source and target rows, at most ``cap`` each, scored by the A-distance."""
    index_s = np.sort(rng.choice(len(pair.source), size=min(len(pair.source), cap), replace=False))
    index_t = np.sort(rng.choice(len(pair.target), size=min(len(pair.target), cap), replace=False))
    return index_s, index_t


def evaluate_pair(
    models: ModelSet,
    pair: DomainPair,
    index_s: np.ndarray,
    index_t: np.ndarray,
    seed: int,
    probe: ProbeKind = ProbeKind.LOGISTIC,
) -> tuple[float, float]:
    """Target accuracy and A-distance (NaN below the sample floor).

    Raises NumericError when parameters, logits or features are not finite.
    """
    if len(pair.target) == 0:
        raise DatasetError(f"{pair.target.name}: cannot score an empty dataset")
    logits = predict_logits(models, pair.target.images)
    feat_s = domain_features(models, pair.source.images[index_s])
    feat_t = domain_features(models, pair.target.images[index_t])
    models.check_finite(
        {"target_logits": logits, "source_features": feat_s, "target_features": feat_t}
    )
    accuracy = _accuracy(logits, pair.target)
    if min(index_s.size, index_t.size) < MIN_A_DISTANCE_SAMPLES:
        return accuracy, float("nan")
    return accuracy, a_distance(feat_s, feat_t, seed=seed, probe=probe)


def feature_columns(latent_dim: int) -> list[str]:
    return [f"mu_{i}" for i in range(latent_dim)] + [f"sigma_{i}" for i in range(latent_dim)]


def export_embeddings(
    models: ModelSet, datasets: Mapping[str, LabeledDataset], path: Path
) -> Path:
    """CSV of ``domain, label`` (-1 when withheld) and the ``[mu, sigma]`` features."""
    columns = ["domain", "label", *feature_columns(models.widths.latent_dim)]
    frames = []
    for domain, ds in datasets.items():
        frame = pd.DataFrame(domain_features(models, ds.images), columns=columns[2:])
        labels = ds.labels if ds.labels is not None else np.full(len(ds), -1)
        frame.insert(0, "label", labels)
        frame.insert(0, "domain", domain)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False)
    except OSError as exc:
        raise DatasetError(f"{path}: cannot write embeddings ({exc.strerror})") from exc
    logger.info("embeddings_exported", path=str(path), rows=len(table))
    return Path(path)


def export_generated(
    models: ModelSet, ds: LabeledDataset, path: Path, rng: np.random.Generator
) -> Path:
    """Decode ``ds`` with the target label block and score the results with D_dom.

    Writes the decoded images as an IDX file at ``path`` and ``index,dom_score``
    rows to the sibling ``.csv``.
    """
    with models.frozen():
        code = models.encoder.encode(ds.images)
        z = sample_gaussian((len(ds), models.widths.noise_dim), rng)
        block = class_label_batch("target", models.num_classes, len(ds))
        generated = models.decoder.decode(code, z, block)
        scores = models.discriminator.discriminate(generated).dom_score.numpy()[:, 0]
    decoded = LabeledDataset(
        images=generated.numpy(),
        labels=None,
        name=f"{ds.name}-generated",
        image_shape=ds.image_shape,
        num_classes=ds.num_classes,
    )
    path = Path(path)
    write_idx(decoded, path)
    pd.DataFrame({"index": np.arange(len(ds)), "dom_score": scores}).to_csv(
        path.with_suffix(".csv"), index=False
    )
    logger.info(
        "generated_exported", path=str(path), count=len(ds), mean_score=float(scores.mean())
    )
    return path


def load_run(run_path: Path) -> tuple[RunDirectory, RunConfig, DomainPair, ModelSet]:
    """Rebuild a run's data and model from its snapshot and last checkpoint."""
    run = RunDirectory(run_path)
    cfg = run.load_config()
    pair = build_domain_pair(cfg.data, cfg.data_seed)
    models = ModelSet.build(
        pair.dim, pair.num_classes, cfg.network, np.random.default_rng(cfg.seed)
    )
    load_checkpoint(models, run.last_checkpoint)
    return run, cfg, pair, models


def evaluate_run(run_path: Path, probe: ProbeKind = ProbeKind.LOGISTIC) -> EvaluationReport:
    """Recompute the final accuracy and A-distance on the rows training scored."""
    run, cfg, pair, models = load_run(run_path)
    index_s, index_t = evaluation_indices(
        pair, cfg.a_distance_max_samples, RngStreams.from_seed(cfg.seed).eval
    )
    accuracy, distance = evaluate_pair(models, pair, index_s, index_t, cfg.seed, probe)
    logged = logged_distance = None
    try:
        summary = run.load_summary()
        logged, logged_distance = summary.final_accuracy, summary.final_a_distance
    except FileNotFoundError:
        logger.warning("summary_missing", path=str(run.path))
    report = EvaluationReport(
        run=str(run.path),
        target_accuracy=accuracy,
        logged_accuracy=logged,
        matches_log=logged == accuracy,
        a_distance=distance,
        logged_a_distance=logged_distance,
    )
    logger.info("run_evaluated", **report.model_dump())
    return report
