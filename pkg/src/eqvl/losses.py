"""Generator and discriminator objectives for the four training methods.

* ``baseline``: non-saturating patch GAN loss + ``lambda_l1`` x L1.
* ``simple-addition``: baseline + ``lambda_div`` x mean |K| of the prediction.
* ``arctan``: baseline + ``atan_weight`` x arctan(c x |rms K(pred) - rms K(target)|),
  averaged over the batch.
* ``sigmoid``: the discriminator's per-patch real probability is multiplied by
  ``p_equil = logistic(a (r_ref - rms K))``, with ``r_ref`` a running mean of
  the real batches' RMS divergence. The generator sees the same combined
  probability; there is no extra generator-side term.
"""
from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import LossError, NonFiniteError
from .nn import autograd as ag
from .nn.autograd import Tensor


class Method(str, enum.Enum):
    BASELINE = "baseline"
    SIMPLE_ADDITION = "simple-addition"
    SIGMOID = "sigmoid"
    ARCTAN = "arctan"

    def __str__(self) -> str:
        return self.value


METHODS = tuple(m.value for m in Method)


@dataclass(frozen=True)
class LossConfig:
    method: Method = Method.BASELINE
    lambda_l1: float = 100.0
    lambda_div: float = 100.0
    atan_scale: float = 100.0
    atan_weight: float = 5.0
    sigmoid_sharpness: float = 100.0
    ema_decay: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.lambda_l1 <= 0 or self.atan_scale <= 0 or self.atan_weight <= 0 or self.sigmoid_sharpness <= 0:
            raise ValueError("lambda_l1, atan_scale, atan_weight and sigmoid_sharpness must be positive")
        if self.lambda_div < 0:
            raise ValueError("lambda_div must be nonnegative")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class LossBreakdown:
    total: float
    adversarial: float = 0.0
    l1: float = 0.0
    pbr: float = 0.0
    discriminator_loss: float = 0.0
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def backward(self) -> None:
        self.graph.backward()


class RunningMean:
    """Exponential moving average seeded by its first observation."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.value: float | None = None

    def update(self, x: float) -> float:
        x = float(x)
        self.value = x if self.value is None else self.decay * self.value + (1.0 - self.decay) * x
        return self.value


@contextlib.contextmanager
def _term(name: str):
    try:
        yield
    except NonFiniteError as exc:
        raise LossError(f"non-finite value in loss term {name!r}: {exc}", where=name) from exc


def _logistic(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def equilibrium_probability(rms, r_ref: float, sharpness: float = 100.0):
    """Probability that a field with RMS divergence ``rms`` is 'real'."""
    return _logistic(sharpness * (r_ref - np.asarray(rms, dtype=np.float64)))


def rms_divergence_per_image(stress: Tensor, spacing: float = 1.0) -> Tensor:
    k = ag.divergence(stress, spacing)
    return ag.sqrt(ag.mean(ag.square(k), axis=(1, 2, 3)))


def rms_divergence_np(stress: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    from .fields import divergence_array

    return np.sqrt(np.mean(divergence_array(stress, spacing) ** 2, axis=(-3, -2, -1)))


def _neg_log_equil(rms: Tensor, r_ref: float, sharpness: float) -> Tensor:
    """-log p_equil per image, shaped for broadcasting against (N, 1, h, w) logits."""
    z = ag.mul(ag.add(ag.neg(rms), r_ref), sharpness)
    return ag.reshape(ag.softplus(ag.neg(z)), (-1, 1, 1, 1))


def generator_loss(
    cfg: LossConfig,
    pred: Tensor,
    target,
    disc_logits: Tensor,
    r_ref: float | None = None,
    spacing: float = 1.0,
) -> LossBreakdown:
    target_t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target_t.shape:
        raise ValueError(f"pred {pred.shape} and target {target_t.shape} differ")
    method = cfg.method

    with _term("adversarial"):
        adv = ag.mean(ag.softplus(ag.neg(disc_logits)))
        if method is Method.SIGMOID:
            if r_ref is None:
                raise ValueError("sigmoid method needs the running real RMS divergence r_ref")
            rms = rms_divergence_per_image(pred, spacing)
            nle = _neg_log_equil(rms, r_ref, cfg.sigmoid_sharpness)
            adv = ag.mean(ag.add(ag.softplus(ag.neg(disc_logits)), nle))
    with _term("l1"):
        l1 = ag.mean(ag.absolute(ag.add(pred, ag.neg(target_t))))
    total = ag.add(adv, ag.mul(l1, cfg.lambda_l1))

    pbr = None
    if method is Method.SIMPLE_ADDITION:
        with _term("pbr"):
            pbr = ag.mul(ag.mean(ag.absolute(ag.divergence(pred, spacing))), cfg.lambda_div)
    elif method is Method.ARCTAN:
        with _term("pbr"):
            rms_p = rms_divergence_per_image(pred, spacing)
            rms_t = rms_divergence_np(target_t.data, spacing)
            gap = ag.absolute(ag.add(rms_p, -rms_t))
            pbr = ag.mul(ag.mean(ag.arctan(ag.mul(gap, cfg.atan_scale))), cfg.atan_weight)
    if pbr is not None:
        total = ag.add(total, pbr)
    with _term("total"):
        if not np.isfinite(total.data):
            raise NonFiniteError("total", where="total")
    return LossBreakdown(
        total=total.item(),
        adversarial=adv.item(),
        l1=l1.item(),
        pbr=0.0 if pbr is None else pbr.item(),
        graph=total,
    )


def discriminator_loss(
    cfg: LossConfig,
    disc,
    micro,
    real_stress,
    fake_stress,
    r_ref: float | None = None,
    spacing: float = 1.0,
) -> LossBreakdown:
    """Patch BCE with real=1 / fake=0; ``fake_stress`` must already be detached."""
    micro = micro if isinstance(micro, Tensor) else Tensor(micro)
    real = real_stress if isinstance(real_stress, Tensor) else Tensor(real_stress)
    fake = fake_stress.detach() if isinstance(fake_stress, Tensor) else Tensor(fake_stress)
    with _term("discriminator"):
        lr = disc(micro, real)
        lf = disc(micro, fake)
        real_term = ag.softplus(ag.neg(lr))
        if cfg.method is Method.SIGMOID:
            if r_ref is None:
                raise ValueError("sigmoid method needs the running real RMS divergence r_ref")
            a = cfg.sigmoid_sharpness
            nle_real = np.logaddexp(0.0, -a * (r_ref - rms_divergence_np(real.data, spacing)))
            nle_fake = np.logaddexp(0.0, -a * (r_ref - rms_divergence_np(fake.data, spacing)))
            real_term = ag.add(real_term, nle_real.reshape(-1, 1, 1, 1))
            # log P(real) of the fake under the combined probability, kept strictly negative
            log_p = ag.add(ag.neg(ag.softplus(ag.neg(lf))), -nle_fake.reshape(-1, 1, 1, 1))
            log_p = ag.add(log_p, -1e-12)
            fake_term = ag.neg(ag.log1mexp(log_p))
        else:
            fake_term = ag.softplus(lf)
        loss = ag.mul(ag.add(ag.mean(real_term), ag.mean(fake_term)), 0.5)
    value = loss.item()
    return LossBreakdown(total=value, discriminator_loss=value, graph=loss)
