"""Tests for the four-stage training step, the epoch loop and run directories."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest
from prometheus_client import REGISTRY

import services.evaluator.evaluate as evaluate_module
import services.trainer.trainer as trainer_module
from services.data.sampling import BatchSampler
from services.data.synthetic import make_moons_pair
from services.data.tasks import build_domain_pair
from services.evaluator.evaluate import evaluate_run
from services.trainer.mixup import class_label_batch
from services.trainer.networks import LatentCode, ModelSet
from services.trainer.run_dir import (
    METRICS_NAME,
    SNAPSHOT_NAME,
    SUMMARY_NAME,
    RunDirectory,
    read_metrics,
)
from services.trainer.trainer import (
    STAGE_OBJECTIVES,
    RngStreams,
    StageObjective,
    StepInputs,
    classifier_objective,
    decoder_objective,
    discriminator_objective,
    encoder_objective,
    source_only_baseline,
    train,
    train_step,
)
from shared.errors import NonFiniteLossError, NumericError
from shared.schemas import METRICS_COLUMNS, DataConfig, RunConfig, Stage, Toggles
from shared.tensor_core import Tensor


def counter(name: str, **labels: str) -> float:
    return REGISTRY.get_sample_value(name, labels) or 0.0


def strip_timing(records) -> list[dict]:
    return [r.model_dump(exclude={"wall_time_seconds"}) for r in records]


@pytest.fixture
def batch(moons_pair):
    return BatchSampler(moons_pair, 32, np.random.default_rng(0)).next_batch()


class TestStepOrder:
    def test_update_order(self):
        assert list(STAGE_OBJECTIVES) == [
            Stage.DISCRIMINATOR,
            Stage.DECODER,
            Stage.CLASSIFIER,
            Stage.ENCODER,
        ]

    def test_rng_streams_are_independent(self):
        streams = RngStreams.from_seed(0)
        draws = [g.random() for g in (streams.init, streams.data, streams.train, streams.eval)]
        assert len(set(draws)) == 4


class TestStageIsolation:
    @pytest.mark.parametrize("stage", list(Stage))
    def test_each_stage_updates_only_its_subnetwork(
        self, stage, models, batch, small_config, monkeypatch
    ):
        monkeypatch.setattr(
            trainer_module, "STAGE_OBJECTIVES", {stage: STAGE_OBJECTIVES[stage]}
        )
        before = models.fingerprints()
        train_step(models, batch, 0.7, 0.9, small_config, np.random.default_rng(0))
        after = models.fingerprints()
        assert {s for s in Stage if before[s] != after[s]} == {stage}

    def test_full_step_updates_every_subnetwork(self, models, batch, small_config):
        before = models.fingerprints()
        bundle = train_step(models, batch, 0.7, 0.9, small_config, np.random.default_rng(0))
        after = models.fingerprints()
        assert all(before[s] != after[s] for s in Stage)
        assert bundle.adv_s.item() < 0
        assert bundle.tri_m.item() >= 0


class TestStageActivity:
    def test_no_mixed_tensors_without_mixup(self, models, batch, small_config):
        cfg = small_config.model_copy(
            update={"toggles": Toggles(pixel_mixup=False, feature_mixup=False)}
        )
        pixel = counter("trainer_mixed_tensors_built_total", level="pixel")
        feature = counter("trainer_mixed_tensors_built_total", level="feature")
        bundle = train_step(models, batch, 0.4, 0.9, cfg, np.random.default_rng(0))
        assert counter("trainer_mixed_tensors_built_total", level="pixel") == pixel
        assert counter("trainer_mixed_tensors_built_total", level="feature") == feature
        assert bundle.soft_m.item() == 0.0 and bundle.adv_m.item() == 0.0

    def test_mixed_tensors_built_when_enabled(self, models, batch, small_config):
        pixel = counter("trainer_mixed_tensors_built_total", level="pixel")
        train_step(models, batch, 0.4, 0.9, small_config, np.random.default_rng(0))
        assert counter("trainer_mixed_tensors_built_total", level="pixel") == pixel + 1

    def test_discriminator_and_decoder_skipped_for_source_only(
        self, models, batch, small_config
    ):
        cfg = small_config.source_only()
        before = models.fingerprints()
        skipped = counter("trainer_stages_skipped_total", stage="discriminator")
        train_step(models, batch, 0.5, 0.9, cfg, np.random.default_rng(0))
        after = models.fingerprints()
        assert before[Stage.DISCRIMINATOR] == after[Stage.DISCRIMINATOR]
        assert before[Stage.DECODER] == after[Stage.DECODER]
        assert counter("trainer_stages_skipped_total", stage="discriminator") == skipped + 1

    def test_per_row_lambda(self, models, batch, small_config):
        lam = np.linspace(0.0, 1.0, len(batch))
        bundle = train_step(models, batch, lam, 0.9, small_config, np.random.default_rng(0))
        assert np.isfinite(list(bundle.scalars().values())).all()


class TestObjectives:
    def test_discriminator_gradient_linear_in_omega(self, models, batch, small_config):
        def discriminator_grads(omega: float) -> np.ndarray:
            cfg = small_config.model_copy(update={"omega": omega})
            step = StepInputs.prepare(batch, 0.7, 0.9, cfg)
            with models.trainable(Stage.DISCRIMINATOR) as net:
                discriminator_objective(
                    models, step, cfg, np.random.default_rng(0)
                ).loss.backward()
                grads = [p.grad_or_zeros().ravel() for p in net.parameters().values()]
            return np.concatenate(grads)

        g0, g1, g2 = (discriminator_grads(w) for w in (0.0, 1.0, 2.0))
        assert np.allclose(g2 - g1, g1 - g0, rtol=1e-9, atol=1e-12)
        assert np.allclose(g2 - g0, 2.0 * (g1 - g0), rtol=1e-9, atol=1e-12)
        assert not np.allclose(g1, g0)

    def test_adversarial_terms_reported_without_phi(self, models, batch, small_config):
        cfg = small_config.model_copy(update={"phi": 0.0})
        step = StepInputs.prepare(batch, 0.7, 0.9, cfg)
        with models.frozen():
            objective = discriminator_objective(models, step, cfg, np.random.default_rng(0))
        terms = {name: value.item() for name, value in objective.terms.items()}
        assert terms["adv_s"] < 0 and terms["adv_t"] < 0 and terms["adv_m"] < 0
        expected = terms["cls_s_g"] + cfg.omega * (terms["soft_m"] + terms["tri_m"])
        assert objective.loss.item() == pytest.approx(expected, rel=1e-12)

    def test_supervised_case_decreases_source_loss(self, small_config):
        pair = make_moons_pair(64, noise=0.0, shift=0.0, seed=0)
        batch = BatchSampler(pair, 64, np.random.default_rng(0)).next_batch()
        cfg = small_config.model_copy(
            update={"toggles": Toggles.all_off(), "phi": 0.0, "omega": 0.0}
        )
        models = ModelSet.build(2, 2, cfg.network, np.random.default_rng(1))
        losses = [
            train_step(models, batch, 0.5, 0.9, cfg, np.random.default_rng(0)).cls_c.item()
            for _ in range(10)
        ]
        assert all(b - a <= 1e-6 for a, b in zip(losses, losses[1:], strict=False))
        assert losses[-1] < losses[0]

    def test_discriminator_step_descends_its_objective(self, models, batch, small_config):
        step = StepInputs.prepare(batch, 0.7, 0.9, small_config)

        def objective() -> float:
            with models.frozen():
                value = discriminator_objective(
                    models, step, small_config, np.random.default_rng(11)
                )
            return value.loss.item()

        before = objective()
        for _ in range(5):
            with models.trainable(Stage.DISCRIMINATOR) as net:
                discriminator_objective(
                    models, step, small_config, np.random.default_rng(11)
                ).loss.backward()
                net.step()
        assert objective() < before

    def test_non_finite_term_aborts(self, models, batch, small_config, monkeypatch):
        def broken(*_args) -> StageObjective:
            value = Tensor(float("nan"), requires_grad=True)
            return StageObjective(loss=value, terms={"cls_c": value})

        monkeypatch.setattr(
            trainer_module, "STAGE_OBJECTIVES", {Stage.CLASSIFIER: broken}
        )
        aborts = counter("trainer_nonfinite_aborts_total", term="cls_c")
        with pytest.raises(NonFiniteLossError, match="cls_c"):
            train_step(models, batch, 0.5, 0.9, small_config, np.random.default_rng(0))
        assert counter("trainer_nonfinite_aborts_total", term="cls_c") == aborts + 1


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


def check_parameter_gradients(
    models: ModelSet,
    stage: Stage,
    value_of: Callable[[], Tensor],
    rng: np.random.Generator,
    entries: int = 4,
    h: float = 1e-5,
) -> int:
    """Compare backprop against central differences on random entries of ``stage``.

    Entries whose one-sided differences disagree sit on a relu or clip kink and
    are skipped. Returns the number of entries compared.
    """
    with models.trainable(stage) as net:
        value_of().backward()
        params = net.parameters()
        analytic = {name: p.grad_or_zeros().copy() for name, p in params.items()}
    names = sorted(params)
    compared = 0
    with models.frozen():
        for _ in range(entries):
            name = names[rng.integers(len(names))]
            param = params[name]
            idx = tuple(int(rng.integers(n)) for n in param.shape)
            original = param.data[idx]
            values = []
            for offset in (h, -h, 0.0):
                param.data[idx] = original + offset
                values.append(value_of().item())
            param.data[idx] = original
            up, down, centre = values
            ahead, behind = (up - centre) / h, (centre - down) / h
            if abs(ahead - behind) > 1e-3 * max(1.0, abs(ahead)):
                continue
            numeric = (up - down) / (2 * h)
            exact = analytic[name][idx]
            assert abs(exact - numeric) <= 1e-4 * max(abs(exact), abs(numeric)) + 1e-7, (
                f"{stage.value}.{name}{idx}: backprop {exact}, finite difference {numeric}"
            )
            compared += 1
    return compared


# (objective, reported term, subnetwork whose parameters the term is checked against)
GRADIENT_CASES = [
    (encoder_objective, "kl", Stage.ENCODER),
    (encoder_objective, "cls_t_g", Stage.ENCODER),
    (classifier_objective, "cls_c", Stage.CLASSIFIER),
    (decoder_objective, "cls_s_g", Stage.DECODER),
    (discriminator_objective, "cls_s_g", Stage.DISCRIMINATOR),
    (discriminator_objective, "adv_s", Stage.DISCRIMINATOR),
    (discriminator_objective, "soft_m", Stage.DISCRIMINATOR),
    (discriminator_objective, "tri_m", Stage.DISCRIMINATOR),
    (discriminator_objective, "adv_t", Stage.DECODER),
    (discriminator_objective, "adv_m", Stage.DECODER),
]


class TestParameterGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_loss_terms_match_finite_differences(self, seed, widths, moons_pair, small_config):
        rng = np.random.default_rng(seed)
        models = ModelSet.build(2, 2, widths, rng)
        batch = BatchSampler(moons_pair, 16, rng).next_batch()
        lam = float(rng.uniform(0.55, 0.95))
        # with two classes every target row clears tau = 0.4, so cls_t_g keeps all rows
        step = StepInputs.prepare(batch, lam, 0.4, small_config)
        for objective, term, stage in GRADIENT_CASES:

            def value_of(objective=objective, term=term) -> Tensor:
                outcome = objective(models, step, small_config, np.random.default_rng(seed))
                return outcome.terms[term]

            assert check_parameter_gradients(models, stage, value_of, rng) > 0, term

    @pytest.mark.parametrize("seed", range(20))
    def test_decoded_sum_wrt_mu(self, seed, widths):
        rng = np.random.default_rng(seed)
        models = ModelSet.build(2, 2, widths, rng)
        rows = 5
        mu0 = rng.normal(size=(rows, widths.latent_dim))
        sigma = Tensor(rng.uniform(0.5, 1.5, size=(rows, widths.latent_dim)))
        z = Tensor(rng.normal(size=(rows, widths.noise_dim)))
        block = class_label_batch("source", 2, rows, y_s=rng.integers(0, 2, size=rows))

        def total(mu: np.ndarray) -> float:
            decoded = models.decoder.decode(LatentCode(mu=Tensor(mu), sigma=sigma), z, block)
            return decoded.sum().item()

        with models.frozen():
            mu = Tensor(mu0, requires_grad=True)
            models.decoder.decode(LatentCode(mu=mu, sigma=sigma), z, block).sum().backward()
            numeric = central_difference(total, mu0)
        assert np.allclose(mu.grad, numeric, rtol=1e-4, atol=1e-7)


class TestTrain:
    def test_records_every_epoch(self, moons_pair, small_config):
        _, records = train(moons_pair, small_config)
        assert [r.epoch for r in records] == [1, 2]
        for r in records:
            assert 0.0 <= r.target_accuracy <= 1.0
            assert 0.0 <= r.a_distance <= 2.0
            assert 0.0 <= r.pseudo_kept_fraction <= 1.0

    def test_same_seed_identical_logs(self, moons_pair, small_config):
        _, first = train(moons_pair, small_config)
        _, second = train(moons_pair, small_config)
        assert strip_timing(first) == strip_timing(second)

    def test_prefetch_does_not_change_results(self, moons_pair, small_config):
        _, inline = train(moons_pair, small_config)
        _, threaded = train(moons_pair, small_config.model_copy(update={"prefetch_batches": 3}))
        assert strip_timing(inline) == strip_timing(threaded)

    def test_source_only_baseline_matches_disabled_config(self, moons_pair, small_config):
        _, last = source_only_baseline(moons_pair, small_config)
        _, records = train(moons_pair, small_config.source_only())
        assert strip_timing([last]) == strip_timing([records[-1]])
        assert last.adv_s == 0.0 and last.cls_s_g == 0.0

    def test_run_directory_contents(self, moons_pair, small_config, tmp_path):
        train(moons_pair, small_config, tmp_path / "run")
        run = RunDirectory(tmp_path / "run")
        for name in (SNAPSHOT_NAME, METRICS_NAME, SUMMARY_NAME, "metrics.prom"):
            assert (run.path / name).exists()
        assert run.last_checkpoint.exists()
        assert sorted(p.name for p in run.checkpoints.glob("epoch-*.ckpt")) == [
            "epoch-0001.ckpt",
            "epoch-0002.ckpt",
        ]
        metrics = read_metrics(run.path)
        assert list(metrics.columns) == METRICS_COLUMNS
        assert len(metrics) == small_config.epochs
        assert run.load_config() == small_config
        summary = run.load_summary()
        assert summary.final_accuracy == pytest.approx(metrics["target_accuracy"].iloc[-1])
        assert summary.best_accuracy == pytest.approx(metrics["target_accuracy"].max())

    def test_rerun_replaces_metrics(self, moons_pair, small_config, tmp_path):
        train(moons_pair, small_config, tmp_path / "run")
        train(moons_pair, small_config, tmp_path / "run")
        assert len(read_metrics(tmp_path / "run")) == small_config.epochs

    def test_non_finite_outputs_abort_evaluation(self, moons_pair, small_config, monkeypatch):
        monkeypatch.setattr(
            evaluate_module, "predict_logits", lambda _m, x: np.full((len(x), 2), np.nan)
        )
        with pytest.raises(NumericError, match="target_logits"):
            train(moons_pair, small_config)

    def test_evaluation_reproduces_logged_accuracy(self, small_config, tmp_path):
        cfg = small_config
        pair = make_moons_pair(cfg.data.n, cfg.data.noise, float(cfg.data.shift), cfg.data_seed)
        train(pair, cfg, tmp_path / "run")
        report = evaluate_run(tmp_path / "run")
        assert report.matches_log
        assert report.target_accuracy == report.logged_accuracy
        assert report.a_distance == report.logged_a_distance


@pytest.mark.slow
class TestAdaptationDirection:
    @pytest.fixture(
        scope="class",
        params=[
            DataConfig(task="moons", n=1000, shift="30"),
            DataConfig(task="digits", shift="invert"),
        ],
        ids=["moons", "digits"],
    )
    def runs(self, request):
        """(source-only, adapted) final records for seeds 0, 1 and 2."""
        cfg = RunConfig(data=request.param)
        pairs = []
        for seed in (0, 1, 2):
            seeded = cfg.model_copy(update={"seed": seed})
            pair = build_domain_pair(seeded.data, seeded.data_seed)
            _, baseline = source_only_baseline(pair, seeded)
            _, records = train(pair, seeded)
            pairs.append((baseline, records[-1]))
        return pairs

    def test_gain_over_source_only(self, runs):
        gains = [adapted.target_accuracy - baseline.target_accuracy for baseline, adapted in runs]
        assert np.mean(gains) >= 0.10

    def test_adapted_features_are_closer(self, runs):
        baseline = np.mean([b.a_distance for b, _ in runs])
        adapted = np.mean([a.a_distance for _, a in runs])
        assert adapted < baseline
