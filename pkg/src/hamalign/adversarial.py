"""Adversarial feature alignment with a single discriminator.

The discriminator scores a feature map as "source"; its binary cross-entropy
objective is the negation of the alignment log-likelihood
L_adv = mean_s log p + mean_t log(1 - p). The discriminator descends on the
cross-entropy (so it ascends on L_adv), while the gradient crossing back
into the feature extractor passes through a gradient reversal layer scaled
by the adversarial weight, pushing the features toward indistinguishability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .rng import CounterRng
from .tensor import ConfigurationError, DimensionError, Tensor, grl

PROB_CLAMP = 1e-7

# probabilities clipped to [PROB_CLAMP, 1 - PROB_CLAMP] before the log;
# each occurrence is counted here so training can report saturation
saturation_events = 0


def reset_saturation_counter():
    global saturation_events
    saturation_events = 0


@dataclass
class GrlConfig:
    lam: float = 0.1           # adversarial weight ("lambda" in configs)
    reversal_scale: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"GrlConfig: lambda must be >= 0, got {self.lam}")
        if self.reversal_scale <= 0:
            raise ConfigurationError(
                f"GrlConfig: reversal_scale must be > 0, got {self.reversal_scale}")


@dataclass
class Discriminator:
    """Image-level domain classifier: two 3x3 conv stages (C -> C/2 -> C/4)
    with leaky activations, global average pooling, then one logit."""

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fc_w: Tensor
    fc_b: Tensor
    slope: float = 0.2

    @classmethod
    def init(cls, channels: int, rng: CounterRng):
        if channels % 4:
            raise ConfigurationError(f"Discriminator: channels {channels} must be divisible by 4")
        c2, c4 = channels // 2, channels // 4
        def u(shape, fan_in):
            a = np.sqrt(3.0 / fan_in)
            return Tensor(rng.uniform(shape, -a, a), requires_grad=True)
        return cls(
            conv1_w=u((c2, channels, 3, 3), channels * 9),
            conv1_b=Tensor(np.zeros(c2), requires_grad=True),
            conv2_w=u((c4, c2, 3, 3), c2 * 9),
            conv2_b=Tensor(np.zeros(c4), requires_grad=True),
            fc_w=u((1, c4), c4),
            fc_b=Tensor(np.zeros(1), requires_grad=True),
        )

    def named(self):
        return [("disc.conv1.weight", self.conv1_w), ("disc.conv1.bias", self.conv1_b),
                ("disc.conv2.weight", self.conv2_w), ("disc.conv2.bias", self.conv2_b),
                ("disc.fc.weight", self.fc_w), ("disc.fc.bias", self.fc_b)]

    def parameters(self):
        return [t for _, t in self.named()]


def discriminator_forward(v: Tensor, d: Discriminator) -> Tensor:
    """Probability (scalar tensor in (0,1)) that the feature map is source."""
    if v.data.ndim != 3 or v.data.shape[0] != d.conv1_w.data.shape[1]:
        raise DimensionError(f"discriminator_forward: feature {v.shape} incompatible with "
                             f"discriminator channels {d.conv1_w.data.shape[1]}")
    h = T.leaky_relu(T.conv2d(v, d.conv1_w, d.conv1_b, stride=1, pad=1), d.slope)
    h = T.leaky_relu(T.conv2d(h, d.conv2_w, d.conv2_b, stride=1, pad=1), d.slope)
    pooled = T.reshape(T.global_avg_pool(h), (1, h.data.shape[0]))
    logit = T.linear(pooled, d.fc_w, d.fc_b)
    return T.reshape(T.sigmoid(logit), ())


def _clamped_log(p: Tensor) -> Tensor:
    global saturation_events
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    val = float(p.data)
    if val < lo or val > hi:
        saturation_events += 1
        p = T.clamp(p, lo, hi)
    return T.log(p)


def adversarial_loss(p_source: Sequence[Tensor], p_target: Sequence[Tensor]) -> Tensor:
    """mean_s log p + mean_t log(1 - p); strictly negative under clamping."""
    if not p_source or not p_target:
        raise ValueError("adversarial_loss: need at least one sample per domain")
    src = [_clamped_log(p) for p in p_source]
    tgt = [_clamped_log(T.sub(Tensor(1.0), p)) for p in p_target]
    return T.add(T.mean_tensors(src), T.mean_tensors(tgt))


def adversarial_loss_value(p_source, p_target) -> float:
    """Same formula over plain floats (no graph), for analysis/metrics."""
    ps = np.clip(np.asarray(p_source, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    pt = np.clip(np.asarray(p_target, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.mean(np.log(ps)) + np.mean(np.log(1.0 - pt)))


@dataclass
class Sgd:
    """Plain stochastic gradient descent; the only optimizer state is lr."""

    lr: float

    def step(self, params: Sequence[Tensor]):
        for t in params:
            if t.grad is not None:
                t.data -= self.lr * t.grad

    def zero(self, params: Sequence[Tensor]):
        for t in params:
            t.grad = None


def train_step(model, source_images: np.ndarray, source_gts: List,
               target_images: np.ndarray, grl_cfg: GrlConfig, opt: Sgd):
    """One joint update on a paired source/target batch.

    Builds a single graph: detection loss on the source batch plus, when the
    model carries a discriminator, the discriminator's cross-entropy over
    both domains. The adversarial weight enters at the GRL boundary as
    lambda * reversal_scale, so the discriminator's own update is unscaled
    and the feature-side gradient is exactly -lambda * (upstream gradient).
    With lambda = 0 the alignment branch is detached and the detector's
    trajectory is bit-identical to an alignment-free build.

    Returns (detection loss value, alignment log-likelihood value or None).
    """
    if len(source_images) == 0 or (model.disc is not None and len(target_images) == 0):
        raise ValueError("train_step: empty batch")
    params = model.parameter_tensors()
    opt.zero(params)

    det_terms = []
    source_feats = []
    for img, gts in zip(source_images, source_gts):
        loss_i, feats = model.detection_loss(img, gts, keep_features=True)
        det_terms.append(loss_i)
        source_feats.append(feats)
    l_det = T.mean_tensors(det_terms)

    l_adv_value = None
    total = l_det
    if model.disc is not None:
        scale = grl_cfg.lam * grl_cfg.reversal_scale
        p_src, p_tgt = [], []
        for feats in source_feats:
            v = model.alignment_features(*feats)
            v = grl(v, scale) if scale > 0 else v.detach()
            p_src.append(discriminator_forward(v, model.disc))
        for img in target_images:
            f, p = model.features(img)
            v = model.alignment_features(f, p)
            v = grl(v, scale) if scale > 0 else v.detach()
            p_tgt.append(discriminator_forward(v, model.disc))
        l_adv = adversarial_loss(p_src, p_tgt)
        l_adv_value = float(l_adv.data)
        total = T.add(l_det, T.neg(l_adv))  # discriminator cross-entropy

    T.backward(total)
    opt.step(params)
    return float(l_det.data), l_adv_value
