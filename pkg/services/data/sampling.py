"""Subsampling protocol, mini-batch streams and a bounded prefetch queue."""

from __future__ import annotations

import math
import queue
import threading
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from itertools import islice
from typing import TypeVar

import numpy as np

from services.data.datasets import DomainPair, LabeledDataset, TrainingView
from shared.errors import DatasetError
from shared.logging_config import get_logger

logger = get_logger(__name__)

T = TypeVar("T")


def _stratified_quotas(
    labels: np.ndarray, n: int, num_classes: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-class sample counts summing to ``n`` that differ by at most one where supply allows."""
    supply = np.bincount(labels, minlength=num_classes)
    quotas = np.zeros(num_classes, dtype=np.int64)
    remaining = n
    while remaining:
        open_classes = np.flatnonzero(quotas < supply)
        order = rng.permutation(open_classes)[:remaining]
        quotas[order] += 1
        remaining -= order.size
    return quotas


def _stratified_subset(ds: LabeledDataset, n: int, rng: np.random.Generator) -> LabeledDataset:
    labels = ds.require_labels()
    quotas = _stratified_quotas(labels, n, ds.num_classes, rng)
    picked = [
        rng.choice(np.flatnonzero(labels == k), size=q, replace=False)
        for k, q in enumerate(quotas)
        if q
    ]
    index = np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
    return ds.subset(rng.permutation(index))


def protocol_subsample(
    pair: DomainPair, n_source: int, n_target: int, rng: np.random.Generator
) -> DomainPair:
    """Class-stratified source subset and uniform target subset, both without replacement."""
    if n_source > len(pair.source) or n_target > len(pair.target):
        raise DatasetError(
            f"requested {n_source}/{n_target} samples from domains of size "
            f"{len(pair.source)}/{len(pair.target)}"
        )
    if n_source < 1 or n_target < 1:
        raise DatasetError("subsample sizes must be positive")
    source = _stratified_subset(pair.source, n_source, rng)
    target = pair.target.subset(rng.choice(len(pair.target), size=n_target, replace=False))
    return DomainPair(source=source, target=target)


@dataclass(frozen=True)
class RngStreams:
    """Independent generators for initialisation, batching, training draws and evaluation."""

    init: np.random.Generator
    data: np.random.Generator
    train: np.random.Generator
    eval: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> RngStreams:
        init, data, train, evaluation = (
            np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)
        )
        return cls(init=init, data=data, train=train, eval=evaluation)


@dataclass(frozen=True)
class TrainingBatch:
    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray

    def __len__(self) -> int:
        return self.x_s.shape[0]


class _IndexStream:
    """Consecutive chunks of a sequence of fresh permutations of ``range(n)``."""

    def __init__(self, n: int, rng: np.random.Generator) -> None:
        self._n = n
        self._rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def take(self, size: int) -> np.ndarray:
        while self._order.size < size:
            self._order = np.concatenate([self._order, self._rng.permutation(self._n)])
        chunk, self._order = self._order[:size], self._order[size:]
        return chunk


class BatchSampler:
    """Equal-size source and target batches drawn independently from each domain.

    One epoch is ``ceil(n_s / B)`` iterations, a full pass over the source.
    """

    def __init__(
        self, data: TrainingView | DomainPair, batch_size: int, rng: np.random.Generator
    ) -> None:
        view = data.training_view() if isinstance(data, DomainPair) else data
        if batch_size < 1:
            raise DatasetError(f"batch size must be positive, got {batch_size}")
        if batch_size > len(view.source) or batch_size > len(view.target):
            raise DatasetError(
                f"batch size {batch_size} exceeds a domain size "
                f"({len(view.source)} source, {len(view.target)} target)"
            )
        self.view = view
        self.batch_size = batch_size
        self.iterations_per_epoch = math.ceil(len(view.source) / batch_size)
        self._source = _IndexStream(len(view.source), rng)
        self._target = _IndexStream(len(view.target), rng)

    def next_batch(self) -> TrainingBatch:
        s = self._source.take(self.batch_size)
        t = self._target.take(self.batch_size)
        return TrainingBatch(
            x_s=self.view.source.images[s],
            y_s=self.view.source.require_labels()[s],
            x_t=self.view.target.images[t],
        )

    def __iter__(self) -> Iterator[TrainingBatch]:
        while True:
            yield self.next_batch()

    def epoch(self) -> Iterator[TrainingBatch]:
        return islice(self, self.iterations_per_epoch)


def batch_sampler(
    data: TrainingView | DomainPair, batch_size: int, rng: np.random.Generator
) -> Iterator[TrainingBatch]:
    return iter(BatchSampler(data, batch_size, rng))


class _Failure:
    def __init__(self, exc: BaseException) -> None:
        self.exc = exc


_DONE = object()


def prefetch(iterable: Iterable[T], maxsize: int) -> Iterator[T]:
    """Run ``iterable`` on a producer thread, handing items over a bounded queue.

    Items arrive in the producer's order; an exception raised by the producer
    is re-raised in the consumer. ``maxsize <= 0`` iterates inline.
    """
    if maxsize <= 0:
        yield from iterable
        return

    buffer: queue.Queue[object] = queue.Queue(maxsize=maxsize)
    stop = threading.Event()

    def offer(item: object) -> bool:
        while not stop.is_set():
            try:
                buffer.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for item in iterable:
                if not offer(item):
                    return
        except BaseException as exc:
            offer(_Failure(exc))
            return
        offer(_DONE)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                return
            if isinstance(item, _Failure):
                raise item.exc
            yield item  # type: ignore[misc]
    finally:
        stop.set()
        worker.join(timeout=1.0)
