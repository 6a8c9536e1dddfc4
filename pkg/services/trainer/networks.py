"""Encoder, decoder, classifier and discriminator as small fully connected networks."""

from __future__ import annotations

import copy
import hashlib
from collections.abc import Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from services.trainer.mixup import ClassLabelBatch, ClassLabelBlock
from shared.errors import DimensionError, NumericError
from shared.schemas import NetworkWidths, Stage
from shared.tensor_core import (
    AdamState,
    Tensor,
    adam_step,
    as_tensor,
    concat,
    matmul,
    repeat_rows,
    sigmoid,
    softplus,
    take_rows,
)

SIGMA_FLOOR = 1e-6


@dataclass
class LatentCode:
    mu: Tensor
    sigma: Tensor

    def features(self) -> Tensor:
        """Concatenated ``[mu, sigma]``, the representation the classifier consumes."""
        return concat([self.mu, self.sigma], axis=1)

    def rows(self, index: ArrayLike) -> LatentCode:
        return LatentCode(take_rows(self.mu, index), take_rows(self.sigma, index))

    @staticmethod
    def stack(codes: list[LatentCode]) -> LatentCode:
        return LatentCode(
            concat([c.mu for c in codes], axis=0), concat([c.sigma for c in codes], axis=0)
        )

    def __len__(self) -> int:
        return self.mu.shape[0]


@dataclass
class DiscriminatorOutput:
    dom_score: Tensor
    cls_logits: Tensor
    features: Tensor


def _finite_input(x: Tensor | ArrayLike, who: str) -> Tensor:
    t = as_tensor(x)
    if t.ndim != 2:
        raise DimensionError(f"{who} expects a [B x d] batch, got shape {t.shape}")
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{who}: non-finite input")
    return t


class Linear:
    """Affine layer with He-normal weights and zero bias."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        scale = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, scale, (fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, fan_out)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.weight.shape[0]:
            raise DimensionError(
                f"linear layer expects width {self.weight.shape[0]}, got input {x.shape}"
            )
        return matmul(x, self.weight) + repeat_rows(self.bias, x.shape[0])

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class Subnetwork:
    """Named collection of linear layers with one Adam state per parameter."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.layers: dict[str, Linear] = {}
        self._adam: dict[str, AdamState] = {}

    def _add(self, key: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> Linear:
        self.layers[key] = Linear(fan_in, fan_out, rng)
        return self.layers[key]

    def _trunk(self, prefix: str, x: Tensor) -> Tensor:
        h = x
        for key, layer in self.layers.items():
            if key.startswith(prefix):
                h = layer(h).relu()
        return h

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for key, layer in self.layers.items():
            params[f"{key}.weight"] = layer.weight
            params[f"{key}.bias"] = layer.bias
        return params

    def configure_optimizer(self, learning_rate: float) -> None:
        self._adam = {
            name: AdamState.for_parameter(p, learning_rate)
            for name, p in self.parameters().items()
        }

    def adam_states(self) -> dict[str, AdamState]:
        return self._adam

    def step(self) -> int:
        """Apply Adam to every parameter that received a gradient."""
        updated = 0
        for name, param in self.parameters().items():
            if param.grad is None:
                continue
            adam_step(param, self._adam[name])
            updated += 1
        return updated

    def zero_grad(self) -> None:
        for param in self.parameters().values():
            param.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for param in self.parameters().values():
            param.requires_grad = flag

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, param in self.parameters().items():
            digest.update(name.encode())
            digest.update(param.data.tobytes())
        return digest.hexdigest()


class Encoder(Subnetwork):
    def __init__(
        self, input_dim: int, widths: NetworkWidths, rng: np.random.Generator
    ) -> None:
        super().__init__(Stage.ENCODER.value)
        width = input_dim
        for i in range(widths.encoder_layers):
            self._add(f"trunk{i}", width, widths.encoder_hidden, rng)
            width = widths.encoder_hidden
        self.mu_head = self._add("mu", width, widths.latent_dim, rng)
        self.sigma_head = self._add("sigma", width, widths.latent_dim, rng)

    def encode(self, x: Tensor | ArrayLike) -> LatentCode:
        h = self._trunk("trunk", _finite_input(x, "encode"))
        mu = self.mu_head(h)
        sigma = softplus(self.sigma_head(h)) + SIGMA_FLOOR
        return LatentCode(mu=mu, sigma=sigma)

    def zero_heads(self) -> None:
        self.mu_head.zero_()
        self.sigma_head.zero_()


class Decoder(Subnetwork):
    def __init__(
        self, output_dim: int, num_classes: int, widths: NetworkWidths, rng: np.random.Generator
    ) -> None:
        super().__init__(Stage.DECODER.value)
        self.input_dim = 2 * widths.latent_dim + widths.noise_dim + num_classes + 1
        width = self.input_dim
        for i in range(widths.decoder_layers):
            self._add(f"trunk{i}", width, widths.decoder_hidden, rng)
            width = widths.decoder_hidden
        self.out = self._add("out", width, output_dim, rng)

    def decode(
        self, code: LatentCode, z: Tensor, block: ClassLabelBlock | ClassLabelBatch
    ) -> Tensor:
        """``x_g = N_d([mu, sigma, z, l_cls, l_comp])`` squashed into (0, 1)."""
        rows = len(code)
        if isinstance(block, ClassLabelBlock):
            labels = np.tile(np.append(block.l_cls, block.l_comp), (rows, 1))
        else:
            labels = block.matrix()
        if z.shape[0] != rows or labels.shape[0] != rows:
            raise DimensionError(
                f"decode: code has {rows} rows, noise {z.shape}, label blocks {labels.shape}"
            )
        inputs = concat([code.mu, code.sigma, z, Tensor(labels)], axis=1)
        if inputs.shape[1] != self.input_dim:
            raise DimensionError(
                f"decode: expected input width {self.input_dim}, got {inputs.shape[1]}"
            )
        return sigmoid(self.out(self._trunk("trunk", inputs)))


class Classifier(Subnetwork):
    def __init__(self, num_classes: int, widths: NetworkWidths, rng: np.random.Generator) -> None:
        super().__init__(Stage.CLASSIFIER.value)
        self.input_dim = 2 * widths.latent_dim
        self._add("trunk0", self.input_dim, widths.classifier_hidden, rng)
        self.out = self._add("out", widths.classifier_hidden, num_classes, rng)

    def classify(self, code: LatentCode) -> Tensor:
        features = code.features()
        if features.shape[1] != self.input_dim:
            raise DimensionError(
                f"classify: expected width {self.input_dim}, got {features.shape[1]}"
            )
        return self.out(self._trunk("trunk", features))

    def zero_(self) -> None:
        for layer in self.layers.values():
            layer.zero_()


class Discriminator(Subnetwork):
    """Shared trunk ``f_D`` with a domain head and a class head."""

    def __init__(
        self, input_dim: int, num_classes: int, widths: NetworkWidths, rng: np.random.Generator
    ) -> None:
        super().__init__(Stage.DISCRIMINATOR.value)
        width = input_dim
        for i in range(widths.discriminator_layers):
            self._add(f"trunk{i}", width, widths.discriminator_hidden, rng)
            width = widths.discriminator_hidden
        self._add(f"trunk{widths.discriminator_layers}", width, widths.feature_dim, rng)
        self.dom_head = self._add("dom", widths.feature_dim, 1, rng)
        self.cls_head = self._add("cls", widths.feature_dim, num_classes, rng)

    def discriminate(self, x: Tensor | ArrayLike) -> DiscriminatorOutput:
        features = self._trunk("trunk", _finite_input(x, "discriminate"))
        return DiscriminatorOutput(
            dom_score=sigmoid(self.dom_head(features)),
            cls_logits=self.cls_head(features),
            features=features,
        )

    def zero_heads(self) -> None:
        self.dom_head.zero_()
        self.cls_head.zero_()


@dataclass
class ModelSet:
    encoder: Encoder
    decoder: Decoder
    classifier: Classifier
    discriminator: Discriminator
    input_dim: int
    num_classes: int
    widths: NetworkWidths

    @classmethod
    def build(
        cls,
        input_dim: int,
        num_classes: int,
        widths: NetworkWidths,
        rng: np.random.Generator,
        learning_rate: float = 4e-4,
        encoder_learning_rate: float | None = None,
    ) -> ModelSet:
        models = cls(
            encoder=Encoder(input_dim, widths, rng),
            decoder=Decoder(input_dim, num_classes, widths, rng),
            classifier=Classifier(num_classes, widths, rng),
            discriminator=Discriminator(input_dim, num_classes, widths, rng),
            input_dim=input_dim,
            num_classes=num_classes,
            widths=widths,
        )
        for stage, net in models.subnetworks().items():
            lr = encoder_learning_rate if stage is Stage.ENCODER else None
            net.configure_optimizer(lr or learning_rate)
        return models

    def subnetworks(self) -> dict[Stage, Subnetwork]:
        return {
            Stage.DISCRIMINATOR: self.discriminator,
            Stage.DECODER: self.decoder,
            Stage.CLASSIFIER: self.classifier,
            Stage.ENCODER: self.encoder,
        }

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"{stage.value}.{name}": param
            for stage, net in self.subnetworks().items()
            for name, param in net.parameters().items()
        }

    def zero_grad(self) -> None:
        for net in self.subnetworks().values():
            net.zero_grad()

    @contextmanager
    def trainable(self, stage: Stage) -> Iterator[Subnetwork]:
        """Only ``stage``'s parameters record gradients inside the block."""
        self.zero_grad()
        for other, net in self.subnetworks().items():
            net.set_trainable(other is stage)
        try:
            yield self.subnetworks()[stage]
        finally:
            for net in self.subnetworks().values():
                net.set_trainable(True)

    @contextmanager
    def frozen(self) -> Iterator[ModelSet]:
        """No parameter records gradients inside the block (inference)."""
        for net in self.subnetworks().values():
            net.set_trainable(False)
        try:
            yield self
        finally:
            for net in self.subnetworks().values():
                net.set_trainable(True)

    def fingerprints(self) -> dict[Stage, str]:
        return {stage: net.fingerprint() for stage, net in self.subnetworks().items()}

    def snapshot(self) -> ModelSet:
        """Independent deep copy, safe to evaluate while training continues."""
        return copy.deepcopy(self)

    def check_finite(self, outputs: Mapping[str, ArrayLike] | None = None) -> None:
        """Parameters, and any given network outputs, must be finite."""
        for name, param in self.parameters().items():
            if not np.all(np.isfinite(param.data)):
                raise NumericError(f"parameter '{name}' is not finite")
        for name, value in (outputs or {}).items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"output '{name}' is not finite")
