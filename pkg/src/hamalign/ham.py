"""Hybrid attention: per-level coordinate attention plus cross-level fusion.

The coordinate stage (CAM) splits a feature map into K channel groups, halves
each group into a spatial-attention branch and a channel-attention branch,
re-weights the content features by attention computed from the latent
features, and recombines the branches by concatenation plus a fixed channel
shuffle. The level stage (LAM) pools every re-weighted level, merges the
pooled vectors, derives one coefficient vector per level through a fully
connected layer, and blends the levels into a single aligned map.

All functions are pure graph builders over Tensors; parameters are plain
Tensors owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
import json
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .rng import CounterRng
from .tensor import ConfigurationError, DimensionError, Tensor

PARAM_MODES = ("paper-literal", "broadcast")


@dataclass
class HamConfig:
    """Structural knobs for the attention stack.

    param_mode "paper-literal" binds the spatial weight/bias maps to one
    resolution per level; "broadcast" keeps them (c,1,1) and broadcasts over
    space, trading fidelity for resolution independence.
    """

    K: int
    L: int
    C: int
    gn_eps: float = 1e-5
    param_mode: str = "paper-literal"
    shuffle_sub_groups: int = 2

    def __post_init__(self):
        if self.L < 1:
            raise ConfigurationError(f"HamConfig: L must be >= 1, got {self.L}")
        if self.K < 1 or self.C % (2 * self.K):
            raise ConfigurationError(
                f"HamConfig: C={self.C} must be divisible by 2K={2 * self.K}")
        if self.param_mode not in PARAM_MODES:
            raise ConfigurationError(f"HamConfig: unknown param_mode {self.param_mode!r}")
        if self.gn_eps <= 0:
            raise ConfigurationError(f"HamConfig: gn_eps must be positive, got {self.gn_eps}")

    @property
    def half_channels(self) -> int:
        return self.C // (2 * self.K)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "HamConfig":
        return cls(**json.loads(text))


@dataclass
class CamLevelParams:
    """Learnable attention parameters for one deformation level."""

    w_s: Tensor
    b_s: Tensor
    w_c: Tensor
    b_c: Tensor

    def named(self, level: int):
        return [(f"cam.l{level}.w_s", self.w_s), (f"cam.l{level}.b_s", self.b_s),
                (f"cam.l{level}.w_c", self.w_c), (f"cam.l{level}.b_c", self.b_c)]


@dataclass
class CamParams:
    levels: List[CamLevelParams]

    def named(self):
        out = []
        for i, lv in enumerate(self.levels, start=1):
            out.extend(lv.named(i))
        return out


@dataclass
class LamParams:
    fc_weight: Tensor  # (L*C, C)
    fc_bias: Tensor    # (L*C,)

    def named(self):
        return [("lam.fc_weight", self.fc_weight), ("lam.fc_bias", self.fc_bias)]


@dataclass
class HamParams:
    cam: CamParams
    lam: LamParams

    def named(self):
        return self.cam.named() + self.lam.named()


def init_cam_level(cfg: HamConfig, resolution: Tuple[int, int],
                   channels: int = None) -> CamLevelParams:
    """Weights start at 1 and biases at 0: attention begins at sigmoid(GN(x)),
    informative but far from saturation."""
    c = cfg.half_channels if channels is None else channels
    h, w = resolution
    spatial_shape = (c, h, w) if cfg.param_mode == "paper-literal" else (c, 1, 1)
    return CamLevelParams(
        w_s=Tensor(np.ones(spatial_shape), requires_grad=True),
        b_s=Tensor(np.zeros(spatial_shape), requires_grad=True),
        w_c=Tensor(np.ones((c, 1, 1)), requires_grad=True),
        b_c=Tensor(np.zeros((c, 1, 1)), requires_grad=True),
    )


def init_lam(cfg: HamConfig, rng: CounterRng) -> LamParams:
    return LamParams(
        fc_weight=Tensor(rng.uniform((cfg.L * cfg.C, cfg.C), -1e-2, 1e-2), requires_grad=True),
        fc_bias=Tensor(np.zeros(cfg.L * cfg.C), requires_grad=True),
    )


def init_ham(cfg: HamConfig, resolutions: Sequence[Tuple[int, int]], rng: CounterRng,
             unsplit: bool = False) -> HamParams:
    """Fresh parameters for all L levels; `unsplit` sizes the attention for
    whole feature maps (the no-split ablation) instead of group halves."""
    if len(resolutions) != cfg.L:
        raise ConfigurationError(f"init_ham: {len(resolutions)} resolutions for L={cfg.L}")
    channels = cfg.C if unsplit else cfg.half_channels
    cam = CamParams([init_cam_level(cfg, res, channels) for res in resolutions])
    return HamParams(cam=cam, lam=init_lam(cfg, rng))


def check_levels(levels: Sequence[Tensor], cfg: HamConfig, what: str = "features"):
    if len(levels) != cfg.L:
        raise ConfigurationError(f"{what}: expected {cfg.L} levels, got {len(levels)}")
    for i, lv in enumerate(levels, start=1):
        if lv.data.ndim != 3 or lv.data.shape[0] != cfg.C:
            raise DimensionError(f"{what}: level {i} has shape {lv.shape}, "
                                 f"expected ({cfg.C}, H, W)")


# ---------------------------------------------------------------------------
# coordinate attention (per level)

def split_groups(x: Tensor, k: int) -> List[Tuple[Tensor, Tensor]]:
    """K contiguous channel groups, each halved in order; concatenating all
    parts back in order reproduces the input exactly."""
    c = x.data.shape[0]
    if c % (2 * k):
        raise ConfigurationError(f"split_groups: C={c} not divisible by 2K={2 * k}")
    parts = T.split(x, 2 * k, axis=0)
    return [(parts[2 * i], parts[2 * i + 1]) for i in range(k)]


def spatial_attention(p_k1: Tensor, w_s: Tensor, b_s: Tensor, gn_eps: float = 1e-5) -> Tensor:
    """sigmoid(w_s * GN(p) + b_s), one normalization group per channel."""
    gn = T.group_norm(p_k1, p_k1.data.shape[0], gn_eps)
    return T.sigmoid(T.add(T.mul(w_s, gn), b_s))


def channel_attention(p_k2: Tensor, w_c: Tensor, b_c: Tensor) -> Tensor:
    """sigmoid(w_c * GAP(p) + b_c), a (c,1,1) per-channel gate."""
    pooled = T.global_avg_pool(p_k2)
    return T.sigmoid(T.add(T.mul(w_c, pooled), b_c))


def cam_forward(f_l: Tensor, p_l: Tensor, params: CamLevelParams, cfg: HamConfig,
                use_shuffle: bool = True) -> Tensor:
    """Re-weight one level of content features by split attention.

    Per group: the first half of f is gated by spatial attention from the
    first half of p, the second half by channel attention from the second
    half of p; the halves are concatenated and channel-shuffled. Groups are
    concatenated back in order, so the output shape equals the input shape.
    """
    if f_l.data.shape != p_l.data.shape:
        raise DimensionError(f"cam_forward: content {f_l.shape} and latent {p_l.shape} differ")
    f_pairs = split_groups(f_l, cfg.K)
    p_pairs = split_groups(p_l, cfg.K)
    outs = []
    for (f1, f2), (p1, p2) in zip(f_pairs, p_pairs):
        a_s = spatial_attention(p1, params.w_s, params.b_s, cfg.gn_eps)
        a_c = channel_attention(p2, params.w_c, params.b_c)
        merged = T.concat([T.mul(f1, a_s), T.mul(f2, a_c)], axis=0)
        if use_shuffle:
            merged = T.channel_shuffle(merged, cfg.shuffle_sub_groups)
        outs.append(merged)
    return T.concat(outs, axis=0) if len(outs) > 1 else outs[0]


def cam_forward_unsplit(f_l: Tensor, p_l: Tensor, params: CamLevelParams,
                        cfg: HamConfig) -> Tensor:
    """No-split variant: both attentions come from the whole latent map and
    gate the whole content map sequentially (no halving, no shuffle)."""
    if f_l.data.shape != p_l.data.shape:
        raise DimensionError(f"cam_forward: content {f_l.shape} and latent {p_l.shape} differ")
    a_s = spatial_attention(p_l, params.w_s, params.b_s, cfg.gn_eps)
    a_c = channel_attention(p_l, params.w_c, params.b_c)
    return T.mul(T.mul(f_l, a_s), a_c)


def cam_attention_maps(f_l: Tensor, p_l: Tensor, params: CamLevelParams, cfg: HamConfig):
    """Group-averaged attention, for inspection: (spatial (H,W), channel (c,))."""
    with T.no_grad():
        p_pairs = split_groups(p_l, cfg.K)
        spatial = []
        chan = []
        for p1, p2 in p_pairs:
            a_s = spatial_attention(p1, params.w_s, params.b_s, cfg.gn_eps)
            a_c = channel_attention(p2, params.w_c, params.b_c)
            spatial.append(a_s.data.mean(axis=0))
            chan.append(a_c.data.reshape(-1))
    return (np.mean(spatial, axis=0), np.mean(chan, axis=0))


# ---------------------------------------------------------------------------
# level attention (across levels)

def lam_forward(fhat: Sequence[Tensor], params: LamParams, cfg: HamConfig,
                normalize: str = "softmax") -> Tensor:
    """Blend L same-resolution levels into one map by learned coefficients.

    Pools each level to (C,1,1), sums the pooled vectors, maps the merged
    vector through the fully connected layer to L coefficient vectors, and
    normalizes them per channel across levels (softmax by default, sigmoid
    as the non-convex alternative). Output is sum_l fhat[l] * alpha[l].
    """
    check_levels(fhat, cfg, "lam_forward")
    ref = fhat[0].data.shape
    for lv in fhat[1:]:
        if lv.data.shape != ref:
            raise DimensionError(f"lam_forward: levels must share one resolution, "
                                 f"got {ref} and {lv.data.shape}")
    if params.fc_weight.data.shape != (cfg.L * cfg.C, cfg.C):
        raise ConfigurationError(
            f"lam_forward: fc_weight {params.fc_weight.shape} does not match "
            f"L={cfg.L}, C={cfg.C}")
    pooled = [T.global_avg_pool(lv) for lv in fhat]
    merged = pooled[0]
    for p in pooled[1:]:
        merged = T.add(merged, p)
    logits = T.linear(T.reshape(merged, (1, cfg.C)), params.fc_weight, params.fc_bias)
    logits = T.reshape(logits, (cfg.L, cfg.C))
    if normalize == "softmax":
        alpha = T.softmax_axis(logits, axis=0)
    elif normalize == "sigmoid":
        alpha = T.sigmoid(logits)
    else:
        raise ConfigurationError(f"lam_forward: unknown normalize {normalize!r}")
    rows = T.split(alpha, cfg.L, axis=0)
    out = None
    for lv, row in zip(fhat, rows):
        term = T.mul(lv, T.reshape(row, (cfg.C, 1, 1)))
        out = term if out is None else T.add(out, term)
    return out


def level_coefficients(fhat: Sequence[Tensor], params: LamParams, cfg: HamConfig,
                       normalize: str = "softmax") -> np.ndarray:
    """The (L, C) coefficient matrix LAM would use, detached for inspection."""
    with T.no_grad():
        pooled = [T.global_avg_pool(lv) for lv in fhat]
        merged = pooled[0]
        for p in pooled[1:]:
            merged = T.add(merged, p)
        logits = T.linear(T.reshape(merged, (1, cfg.C)), params.fc_weight, params.fc_bias)
        mat = logits.data.reshape(cfg.L, cfg.C)
        if normalize == "softmax":
            z = mat - mat.max(axis=0, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=0, keepdims=True)
        return 1.0 / (1.0 + np.exp(-mat))


def resample_to_coarsest(levels: Sequence[Tensor]) -> List[Tensor]:
    """Average-pool every level down to the coarsest level's resolution."""
    target_h, target_w = levels[-1].data.shape[1:]
    out = []
    for lv in levels:
        h, w = lv.data.shape[1:]
        if (h, w) == (target_h, target_w):
            out.append(lv)
            continue
        if h % target_h or w % target_w or h // target_h != w // target_w:
            raise DimensionError(f"resample_to_coarsest: {h}x{w} is not an integer "
                                 f"multiple of {target_h}x{target_w}")
        out.append(T.avg_pool2d(lv, h // target_h))
    return out


def ham_forward(f: Sequence[Tensor], p: Sequence[Tensor], params: HamParams,
                cfg: HamConfig, use_shuffle: bool = True) -> Tensor:
    """Full stack: coordinate attention per level, resample to the coarsest
    resolution, then level attention. Output is (C, H_L, W_L)."""
    check_levels(f, cfg, "ham_forward content")
    check_levels(p, cfg, "ham_forward latent")
    fhat = [cam_forward(f_l, p_l, lp, cfg, use_shuffle)
            for f_l, p_l, lp in zip(f, p, params.cam.levels)]
    return lam_forward(resample_to_coarsest(fhat), params.lam, cfg)
