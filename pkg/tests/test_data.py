"""Tests for datasets, IDX files, shifts, synthetic pairs, subsampling and batching."""

from __future__ import annotations

import struct

import numpy as np
import pytest
from scipy import stats
from sklearn.linear_model import LogisticRegression

from services.data.datasets import DomainPair, LabeledDataset
from services.data.idx import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    load_idx,
    read_idx_images,
    write_idx,
)
from services.data.sampling import BatchSampler, prefetch, protocol_subsample
from services.data.synthetic import (
    make_digits_pair,
    make_moons_pair,
    make_shifted_pair,
    unit_to_moons,
)
from services.data.tasks import build_domain_pair, load_manifest_pair, write_domain_pair
from services.data.transforms import (
    Shift,
    apply_shifts,
    block_downsample,
    parse_shifts,
    synth_shift,
)
from shared.errors import (
    BadMagicError,
    CountMismatchError,
    DatasetError,
    TruncatedPayloadError,
)
from shared.schemas import DataConfig, TaskKind


def digits_dataset() -> LabeledDataset:
    return make_digits_pair("none", seed=0).source


def index_dataset(n: int, num_classes: int = 2) -> LabeledDataset:
    """One-pixel images whose value encodes the row index."""
    return LabeledDataset(
        images=(np.arange(n) / (n - 1)).reshape(-1, 1),
        labels=np.arange(n) % num_classes,
        name="index",
        image_shape=(1, 1),
        num_classes=num_classes,
    )


class TestLabeledDataset:
    def test_rejects_pixels_outside_unit_interval(self):
        with pytest.raises(DatasetError):
            LabeledDataset(np.array([[1.5]]), np.array([0]), "bad", (1, 1), 2)

    def test_rejects_label_out_of_range(self):
        with pytest.raises(DatasetError):
            LabeledDataset(np.array([[0.5]]), np.array([2]), "bad", (1, 1), 2)

    def test_images_read_only(self):
        ds = index_dataset(4)
        with pytest.raises(ValueError):
            ds.images[0, 0] = 0.5

    def test_pair_requires_matching_dimensions(self):
        a = index_dataset(4)
        b = LabeledDataset(np.zeros((4, 2)), np.zeros(4), "wide", (1, 2), 2)
        with pytest.raises(DatasetError):
            DomainPair(source=a, target=b)

    def test_training_view_hides_target_labels(self, moons_pair):
        view = moons_pair.training_view()
        assert not hasattr(view.target, "labels")
        assert np.array_equal(view.target.images, moons_pair.target.images)


class TestIdx:
    def write_pair(self, tmp_path, pixels, labels):
        images = tmp_path / "images.idx"
        images.write_bytes(
            struct.pack(">4I", IMAGE_MAGIC, len(pixels), 2, 2) + bytes(np.ravel(pixels))
        )
        label_path = tmp_path / "labels.idx"
        label_path.write_bytes(struct.pack(">2I", LABEL_MAGIC, len(labels)) + bytes(labels))
        return images, label_path

    def test_scaling_endpoints(self, tmp_path):
        pixels = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]], dtype=np.uint8)
        images, labels = self.write_pair(tmp_path, pixels, [1, 0])
        ds = load_idx(images, labels)
        assert set(np.unique(ds.images)) == {0.0, 1.0}
        assert ds.image_shape == (2, 2)
        assert ds.labels.tolist() == [1, 0]

    def test_count_mismatch(self, tmp_path):
        pixels = np.zeros((2, 2, 2), dtype=np.uint8)
        images, labels = self.write_pair(tmp_path, pixels, [1, 0, 1])
        with pytest.raises(CountMismatchError):
            load_idx(images, labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "images.idx"
        path.write_bytes(struct.pack(">4I", 0x0801, 0, 2, 2))
        with pytest.raises(BadMagicError):
            read_idx_images(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "images.idx"
        path.write_bytes(struct.pack(">4I", IMAGE_MAGIC, 3, 2, 2) + b"\x00" * 5)
        with pytest.raises(TruncatedPayloadError):
            read_idx_images(path)

    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = LabeledDataset(
            images=rng.integers(0, 256, size=(7, 12)) / 255.0,
            labels=rng.integers(0, 10, size=7),
            name="random",
            image_shape=(3, 4),
            num_classes=10,
        )
        write_idx(ds, tmp_path / "x.idx", tmp_path / "y.idx")
        back = load_idx(tmp_path / "x.idx", tmp_path / "y.idx", num_classes=10)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)


class TestTransforms:
    def test_invert_is_involution(self):
        ds = digits_dataset()
        shift = Shift("invert")
        twice = synth_shift(synth_shift(ds, shift, None), shift, None)
        assert np.array_equal(twice.images, ds.images)

    def test_rotate_zero_is_identity(self):
        ds = digits_dataset()
        out = synth_shift(ds, Shift("rotate", 0.0), np.random.default_rng(0))
        assert np.array_equal(out.images, ds.images)

    def test_rotate_keeps_labels_and_range(self):
        ds = digits_dataset()
        out = synth_shift(ds, Shift("rotate", 25.0), np.random.default_rng(0))
        assert np.array_equal(out.labels, ds.labels)
        assert out.images.min() >= 0.0 and out.images.max() <= 1.0
        assert not np.array_equal(out.images, ds.images)

    def test_noise_is_seeded(self):
        ds = digits_dataset()
        a = synth_shift(ds, Shift("gaussian_noise", 0.05), np.random.default_rng(3))
        b = synth_shift(ds, Shift("gaussian_noise", 0.05), np.random.default_rng(3))
        assert np.array_equal(a.images, b.images)

    def test_parameter_ranges(self):
        with pytest.raises(DatasetError):
            Shift("rotate", 90.0)
        with pytest.raises(DatasetError):
            Shift("gaussian_noise", -0.1)
        with pytest.raises(DatasetError):
            Shift("intensity_scale", 3.0)

    def test_parse_chain(self):
        assert parse_shifts("rotate:25+noise:0.05") == [
            Shift("rotate", 25.0),
            Shift("gaussian_noise", 0.05),
        ]
        assert parse_shifts("none") == []
        with pytest.raises(DatasetError):
            parse_shifts("blur:2")

    def test_apply_chain_names_result(self):
        ds = digits_dataset()
        out = apply_shifts(ds, parse_shifts("invert+scale:0.5"), np.random.default_rng(0))
        assert out.name.endswith("+invert+intensity_scale:0.5")
        assert out.images.max() <= 0.5

    def test_block_downsample(self):
        image = np.arange(16, dtype=np.float64).reshape(1, 16) / 15.0
        ds = LabeledDataset(image, np.array([0]), "ramp", (4, 4), 2)
        small = block_downsample(ds, 2)
        assert small.image_shape == (2, 2)
        expected = np.array([[2.5, 4.5, 10.5, 12.5]]) / 15.0
        assert np.allclose(small.images, expected)

    def test_block_downsample_with_padding(self):
        ds = LabeledDataset(np.ones((1, 4)), np.array([0]), "ones", (2, 2), 2)
        small = block_downsample(ds, 2, pad_to=4)
        assert small.images.tolist() == [[0.25, 0.25, 0.25, 0.25]]


class TestMoons:
    def test_zero_noise_lies_on_arcs(self):
        pair = make_moons_pair(1000, noise=0.0, shift=0.0, seed=1)
        points = unit_to_moons(pair.source.images)
        outer = points[pair.source.labels == 0]
        inner = points[pair.source.labels == 1]
        assert np.allclose(np.linalg.norm(outer, axis=1), 1.0)
        assert np.allclose(np.linalg.norm(inner - [1.0, 0.5], axis=1), 1.0)

    def test_no_shift_same_generator_different_seeds(self):
        pair = make_moons_pair(400, noise=0.1, shift=0.0, seed=2)
        assert not np.array_equal(pair.source.images, pair.target.images)
        for dim in range(2):
            result = stats.ks_2samp(pair.source.images[:, dim], pair.target.images[:, dim])
            assert result.pvalue > 0.001

    def test_rotation_hurts_linear_classifier(self):
        pair = make_moons_pair(2000, noise=0.1, shift=30.0, seed=0)
        x, y = pair.source.images, pair.source.labels
        clf = LogisticRegression().fit(x[:1000], y[:1000])
        source_acc = clf.score(x[1000:], y[1000:])
        target_acc = clf.score(pair.target.images, pair.target.labels)
        assert source_acc - target_acc >= 0.05

    def test_out_of_range_shift(self):
        with pytest.raises(DatasetError):
            make_moons_pair(100, shift=90.0)

    def test_odd_size(self):
        with pytest.raises(DatasetError):
            make_moons_pair(101)

    def test_deterministic(self):
        a, b = make_moons_pair(100, seed=4), make_moons_pair(100, seed=4)
        assert np.array_equal(a.target.images, b.target.images)


class TestShiftedPairs:
    def test_digits_halves_are_disjoint_and_inverted(self):
        pair = make_digits_pair("invert", seed=0)
        assert len(pair.source) + len(pair.target) == 1797
        assert pair.source.image_shape == (8, 8)
        assert pair.target.images.mean() > 0.5 > pair.source.images.mean()

    def test_splits_into_equal_halves(self):
        pair = make_shifted_pair(digits_dataset(), "rotate:25+noise:0.05", seed=1)
        assert len(pair.source) == 449 and len(pair.target) == 449


class TestProtocolSubsample:
    def test_exact_sizes_and_stratified(self):
        pair = make_digits_pair("invert", seed=0)
        sub = protocol_subsample(pair, 500, 400, np.random.default_rng(0))
        assert len(sub.source) == 500 and len(sub.target) == 400
        counts = np.bincount(sub.source.labels, minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_without_replacement(self):
        pair = DomainPair(source=index_dataset(50), target=index_dataset(60))
        sub = protocol_subsample(pair, 20, 30, np.random.default_rng(1))
        assert len(np.unique(sub.source.images)) == 20
        assert len(np.unique(sub.target.images)) == 30

    def test_same_seed_same_subset(self):
        pair = make_digits_pair("invert", seed=0)
        a = protocol_subsample(pair, 100, 80, np.random.default_rng(5))
        b = protocol_subsample(pair, 100, 80, np.random.default_rng(5))
        assert np.array_equal(a.source.images, b.source.images)
        assert np.array_equal(a.target.images, b.target.images)

    def test_oversized_request(self):
        pair = DomainPair(source=index_dataset(10), target=index_dataset(10))
        with pytest.raises(DatasetError):
            protocol_subsample(pair, 11, 5, np.random.default_rng(0))


class TestBatchSampler:
    def test_iterations_per_epoch(self, moons_pair):
        sampler = BatchSampler(moons_pair, 64, np.random.default_rng(0))
        assert sampler.iterations_per_epoch == 4
        batches = list(sampler.epoch())
        assert len(batches) == 4
        assert all(len(b) == 64 for b in batches)

    def test_same_seed_same_sequence(self, moons_pair):
        a = BatchSampler(moons_pair, 16, np.random.default_rng(3))
        b = BatchSampler(moons_pair, 16, np.random.default_rng(3))
        for _ in range(5):
            x, y = a.next_batch(), b.next_batch()
            assert np.array_equal(x.x_s, y.x_s) and np.array_equal(x.x_t, y.x_t)

    def test_draws_are_uniform(self):
        n = 50
        pair = DomainPair(source=index_dataset(n), target=index_dataset(n))
        sampler = BatchSampler(pair, 7, np.random.default_rng(0))
        counts = np.zeros(n)
        for _ in range(700):
            batch = sampler.next_batch()
            np.add.at(counts, np.rint(batch.x_t[:, 0] * (n - 1)).astype(int), 1)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_labels_follow_images(self):
        pair = DomainPair(source=index_dataset(20), target=index_dataset(20))
        batch = BatchSampler(pair, 5, np.random.default_rng(0)).next_batch()
        index = np.rint(batch.x_s[:, 0] * 19).astype(int)
        assert np.array_equal(batch.y_s, index % 2)

    def test_batch_larger_than_domain(self):
        pair = DomainPair(source=index_dataset(10), target=index_dataset(4))
        with pytest.raises(DatasetError):
            BatchSampler(pair, 5, np.random.default_rng(0))


class TestPrefetch:
    def test_preserves_order(self):
        assert list(prefetch(range(100), 4)) == list(range(100))

    def test_inline_when_disabled(self):
        assert list(prefetch(iter("abc"), 0)) == ["a", "b", "c"]

    def test_producer_error_reaches_consumer(self):
        def broken():
            yield 1
            raise DatasetError("boom")

        out = prefetch(broken(), 2)
        assert next(out) == 1
        with pytest.raises(DatasetError, match="boom"):
            next(out)

    def test_early_close_stops_producer(self):
        stream = prefetch(iter(range(10_000)), 2)
        assert next(stream) == 0
        stream.close()


class TestTasks:
    def test_moons_config(self):
        pair = build_domain_pair(DataConfig(task="moons", n=100, shift="20"), seed=0)
        assert len(pair.source) == 100 and pair.dim == 2

    def test_non_numeric_moons_shift(self):
        with pytest.raises(DatasetError):
            build_domain_pair(DataConfig(task="moons", n=100, shift="invert"), seed=0)

    def test_config_subsample(self):
        data = DataConfig(task="digits", shift="invert", n_source=100, n_target=90)
        pair = build_domain_pair(data, seed=0)
        assert (len(pair.source), len(pair.target)) == (100, 90)

    def test_idx_task(self, tmp_path):
        ds = digits_dataset()
        write_idx(ds, tmp_path / "x.idx", tmp_path / "y.idx")
        data = DataConfig(
            task="idx",
            shift="rotate:25+noise:0.05",
            idx_images=tmp_path / "x.idx",
            idx_labels=tmp_path / "y.idx",
            pad_to=None,
            downsample=2,
        )
        pair = build_domain_pair(data, seed=0)
        assert pair.source.image_shape == (4, 4)

    def test_manifest_round_trip(self, tmp_path):
        pair = build_domain_pair(DataConfig(task="digits", shift="invert"), seed=0)
        manifest = write_domain_pair(pair, tmp_path, TaskKind.DIGITS, "invert", 0)
        assert manifest.source_size == len(pair.source)
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "manifest.json",
            "source-images.idx",
            "source-labels.idx",
            "target-images.idx",
            "target-labels.idx",
        ]
        loaded = load_manifest_pair(tmp_path)
        assert np.array_equal(loaded.source.labels, pair.source.labels)
        assert np.allclose(loaded.target.images, pair.target.images, atol=0.5 / 255)

    def test_manifest_task(self, tmp_path):
        pair = build_domain_pair(DataConfig(task="moons", n=100), seed=0)
        write_domain_pair(pair, tmp_path, TaskKind.MOONS, "30", 0)
        loaded = build_domain_pair(DataConfig(task="manifest", manifest=tmp_path), seed=0)
        assert len(loaded.target) == 100

    def test_manifest_size_disagreement(self, tmp_path):
        pair = build_domain_pair(DataConfig(task="moons", n=100), seed=0)
        write_domain_pair(pair, tmp_path, TaskKind.MOONS, "30", 0)
        path = tmp_path / "manifest.json"
        path.write_text(path.read_text().replace('"source_size": 100', '"source_size": 99'))
        with pytest.raises(DatasetError):
            load_manifest_pair(tmp_path)
