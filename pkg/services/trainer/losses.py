"""Loss terms of the adaptation objective, all expressed through tensor_core."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from numpy.typing import ArrayLike
from scipy import special

from services.trainer.mixup import Ratio
from services.trainer.networks import LatentCode
from shared.errors import DimensionError, DomainError, NonFiniteLossError
from shared.tensor_core import (
    Tensor,
    as_tensor,
    clip,
    log,
    relu,
    softmax_cross_entropy,
    take_rows,
)

SCORE_EPS = 1e-7


def _zero() -> Tensor:
    return Tensor(0.0)


@dataclass
class LossBundle:
    kl: Tensor = field(default_factory=_zero)
    cls_c: Tensor = field(default_factory=_zero)
    adv_s: Tensor = field(default_factory=_zero)
    adv_t: Tensor = field(default_factory=_zero)
    adv_m: Tensor = field(default_factory=_zero)
    soft_m: Tensor = field(default_factory=_zero)
    tri_m: Tensor = field(default_factory=_zero)
    cls_s_g: Tensor = field(default_factory=_zero)
    cls_t_g: Tensor = field(default_factory=_zero)
    pseudo_kept: int = 0

    def scalars(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in LOSS_TERMS}

    def check_finite(self) -> None:
        for name, value in self.scalars().items():
            if not math.isfinite(value):
                raise NonFiniteLossError(name, value)


LOSS_TERMS: tuple[str, ...] = tuple(f.name for f in fields(LossBundle) if f.name != "pseudo_kept")


def one_hot(labels: ArrayLike, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise DomainError(f"class labels must lie in [0, {num_classes})")
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _safe_log_scores(score: Tensor, complement: bool = False) -> Tensor:
    if np.any(score.data < 0) or np.any(score.data > 1) or np.any(np.isnan(score.data)):
        raise DomainError("domain scores must lie in (0, 1)")
    clamped = clip(score, SCORE_EPS, 1.0 - SCORE_EPS)
    return log(1.0 - clamped) if complement else log(clamped)


def kl_loss(code: LatentCode) -> Tensor:
    """Closed-form KL(N(mu, diag sigma^2) || N(0, I)), averaged over the batch."""
    if np.any(code.sigma.data <= 0):
        raise DomainError("kl_loss needs strictly positive sigma")
    mu, sigma = code.mu, code.sigma
    per_entry = mu.square() + sigma.square() - 2.0 * log(sigma) - 1.0
    return (per_entry.sum(axis=1) * 0.5).mean()


def classifier_loss(logits: Tensor, y_s: ArrayLike) -> Tensor:
    return softmax_cross_entropy(logits, one_hot(y_s, logits.shape[1]))


def adversarial_losses(
    d_real_s: Tensor, d_fake_s: Tensor, d_fake_t: Tensor, d_fake_m: Tensor | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Log-likelihood terms the discriminator maximises.

    ``adv_s = E log D(x^s) + E log(1 - D(x^s_g))``, ``adv_t = E log(1 - D(x^t_g))``,
    ``adv_m = E log(1 - D(x^m_g))`` (zero when no mixed features are decoded).
    """
    adv_s = _safe_log_scores(d_real_s).mean() + _safe_log_scores(d_fake_s, complement=True).mean()
    adv_t = _safe_log_scores(d_fake_t, complement=True).mean()
    adv_m = _zero() if d_fake_m is None else _safe_log_scores(d_fake_m, complement=True).mean()
    return adv_s, adv_t, adv_m


def generator_loss(d_fake: Tensor, saturating: bool = False) -> Tensor:
    """Objective the generator side descends for one family of decoded images."""
    if saturating:
        return _safe_log_scores(d_fake, complement=True).mean()
    return -_safe_log_scores(d_fake).mean()


def soft_domain_loss(dom_score_m: Tensor, l_dom_m: Ratio) -> Tensor:
    """Binary cross-entropy of D_dom on raw mixed images against the soft label."""
    label = np.asarray(l_dom_m, dtype=np.float64)
    if np.any(label < 0) or np.any(label > 1):
        raise DomainError(f"soft domain label must lie in [0, 1], got {l_dom_m}")
    if label.ndim == 0:
        target: Tensor | float = float(label)
        rest: Tensor | float = 1.0 - float(label)
    else:
        column = label.reshape(dom_score_m.shape)
        target, rest = Tensor(column), Tensor(1.0 - column)
    log_p = _safe_log_scores(dom_score_m)
    log_q = _safe_log_scores(dom_score_m, complement=True)
    return -(log_p * target + log_q * rest).mean()


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, margin: Ratio) -> Tensor:
    """Batch mean of ``max(0, |a - p|^2 - |a - n|^2 + margin)``."""
    if not f_a.shape == f_p.shape == f_n.shape:
        raise DimensionError(
            f"triplet_loss: anchor {f_a.shape}, positive {f_p.shape}, negative {f_n.shape}"
        )
    d_ap = (f_a - f_p).square().sum(axis=1)
    d_an = (f_a - f_n).square().sum(axis=1)
    margins = np.asarray(margin, dtype=np.float64)
    slack = d_ap - d_an + (float(margins) if margins.ndim == 0 else Tensor(margins))
    return relu(slack).mean()


def pseudo_filter(target_logits: Tensor | ArrayLike, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose top softmax probability reaches ``tau``, with their argmax labels."""
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    logits = as_tensor(target_logits).data
    probs = special.softmax(logits, axis=1)
    kept = np.flatnonzero(probs.max(axis=1) >= tau)
    return kept, probs[kept].argmax(axis=1)


def class_consistency_losses(
    d_cls_logits_s_g: Tensor,
    y_s: ArrayLike,
    d_cls_logits_t_g: Tensor,
    pseudo: tuple[np.ndarray, np.ndarray],
) -> tuple[Tensor, Tensor]:
    cls_s_g = classifier_loss(d_cls_logits_s_g, y_s)
    kept, labels = pseudo
    if kept.size == 0:
        return cls_s_g, _zero()
    cls_t_g = classifier_loss(take_rows(d_cls_logits_t_g, kept), labels)
    return cls_s_g, cls_t_g


def tau_schedule(
    epoch: int, total_epochs: int, tau_start: float = 0.9, tau_end: float = 0.6
) -> float:
    """Confidence threshold ramped linearly from ``tau_start`` down to ``tau_end``."""
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {total_epochs}]")
    if not 0 < tau_end <= tau_start < 1:
        raise DomainError(f"need 0 < tau_end <= tau_start < 1, got {tau_end}, {tau_start}")
    return tau_start - (tau_start - tau_end) * epoch / total_epochs

