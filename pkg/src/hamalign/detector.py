"""Desk-scale set-prediction detector.

A strided conv backbone emits L feature levels with halving resolution; a
single-head dense self-attention layer per level (with fixed 2D sinusoidal
positional encoding on queries and keys) produces the latent levels; a bank
of learned queries cross-attends to all level tokens and two linear heads
emit class logits and sigmoid-squashed boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import tensor as T
from .rng import CounterRng
from .tensor import ConfigurationError, Tensor


def sinusoidal_encoding_2d(h: int, w: int, c: int, temperature: float = 10000.0) -> np.ndarray:
    """(h*w, c) positional code: c/2 channels per axis, sin/cos pairs.

    Row-major token order (row y, then column x), matching the flatten
    convention used everywhere else in the package.
    """
    if c % 4:
        raise ConfigurationError(f"sinusoidal_encoding_2d: channels {c} must be divisible by 4")
    half = c // 2
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    def axis_code(positions):
        ang = positions[:, None] / dim_t[None, :]
        out = np.where(np.arange(half) % 2 == 0, np.sin(ang), np.cos(ang))
        return out
    ys = axis_code(np.arange(h, dtype=np.float64))  # (h, half)
    xs = axis_code(np.arange(w, dtype=np.float64))  # (w, half)
    grid = np.concatenate([
        np.repeat(ys, w, axis=0),          # y varies slowly
        np.tile(xs, (h, 1)),               # x varies fast
    ], axis=1)
    return grid


_pos_cache: dict = {}


def cached_pos_encoding(h: int, w: int, c: int) -> np.ndarray:
    key = (h, w, c)
    if key not in _pos_cache:
        _pos_cache[key] = sinusoidal_encoding_2d(h, w, c)
    return _pos_cache[key]


def _uniform(rng: CounterRng, shape, fan_in: int) -> np.ndarray:
    a = math.sqrt(3.0 / fan_in)
    return rng.uniform(shape, -a, a)


# ---------------------------------------------------------------------------
# backbone

@dataclass
class BackboneNet:
    weights: List[Tensor]   # stage i: (C, C_prev, 3, 3)
    biases: List[Tensor]
    channels: int
    slope: float = 0.1

    @classmethod
    def init(cls, levels: int, channels: int, rng: CounterRng, in_channels: int = 3):
        ws, bs = [], []
        prev = in_channels
        for _ in range(levels):
            ws.append(Tensor(_uniform(rng, (channels, prev, 3, 3), prev * 9), requires_grad=True))
            bs.append(Tensor(np.zeros(channels), requires_grad=True))
            prev = channels
        return cls(weights=ws, biases=bs, channels=channels)

    @property
    def levels(self) -> int:
        return len(self.weights)

    def named(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out.append((f"backbone.conv{i}.weight", w))
            out.append((f"backbone.conv{i}.bias", b))
        return out

    def forward(self, image: Tensor) -> List[Tensor]:
        """image (3,H,W) -> L taps, level l of shape (C, H/2^l, W/2^l)."""
        _, h, w = image.data.shape
        if h % (1 << self.levels) or w % (1 << self.levels):
            raise ConfigurationError(f"backbone: input {h}x{w} not divisible by 2^{self.levels}")
        taps = []
        x = image
        for wt, bt in zip(self.weights, self.biases):
            x = T.leaky_relu(T.conv2d(x, wt, bt, stride=2, pad=1), self.slope)
            taps.append(x)
        return taps


# ---------------------------------------------------------------------------
# encoder

@dataclass
class EncoderNet:
    wq: List[Tensor]
    wk: List[Tensor]
    wv: List[Tensor]
    wo: List[Tensor]
    channels: int

    @classmethod
    def init(cls, levels: int, channels: int, rng: CounterRng):
        def proj():
            return Tensor(_uniform(rng, (channels, channels), channels), requires_grad=True)
        return cls(wq=[proj() for _ in range(levels)],
                   wk=[proj() for _ in range(levels)],
                   wv=[proj() for _ in range(levels)],
                   wo=[proj() for _ in range(levels)],
                   channels=channels)

    def named(self):
        out = []
        for i in range(len(self.wq)):
            out.extend([(f"encoder.l{i + 1}.wq", self.wq[i]), (f"encoder.l{i + 1}.wk", self.wk[i]),
                        (f"encoder.l{i + 1}.wv", self.wv[i]), (f"encoder.l{i + 1}.wo", self.wo[i])])
        return out

    def level_forward(self, x: Tensor, level: int):
        """One level: tokens + positional code drive Q/K, the residual path
        carries the raw tokens, so zero projections pass features through.
        Returns (output level (C,H,W), attention weights (HW,HW))."""
        c, h, w = x.data.shape
        tokens = T.transpose2d(T.reshape(x, (c, h * w)))               # (HW, C)
        pos = Tensor(cached_pos_encoding(h, w, c))
        located = T.add(tokens, pos)
        q = T.linear(located, self.wq[level])
        k = T.linear(located, self.wk[level])
        v = T.linear(tokens, self.wv[level])
        attn = T.softmax_axis(T.mul(T.matmul(q, T.transpose2d(k)), 1.0 / math.sqrt(c)), axis=1)
        out_tokens = T.add(tokens, T.linear(T.matmul(attn, v), self.wo[level]))
        return T.reshape(T.transpose2d(out_tokens), (c, h, w)), attn

    def forward(self, f: List[Tensor]) -> List[Tensor]:
        return [self.level_forward(f_l, i)[0] for i, f_l in enumerate(f)]


# ---------------------------------------------------------------------------
# decoder head

@dataclass
class DecoderHead:
    queries: Tensor          # (N, C)
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    class_weight: Tensor     # (num_classes + 1, C)
    class_bias: Tensor
    box_weight: Tensor       # (4, C)
    box_bias: Tensor

    @classmethod
    def init(cls, num_queries: int, channels: int, num_classes: int, rng: CounterRng):
        def proj(shape, fan_in):
            return Tensor(_uniform(rng, shape, fan_in), requires_grad=True)
        return cls(
            queries=Tensor(rng.uniform((num_queries, channels), -1.0, 1.0), requires_grad=True),
            wq=proj((channels, channels), channels),
            wk=proj((channels, channels), channels),
            wv=proj((channels, channels), channels),
            wo=proj((channels, channels), channels),
            class_weight=proj((num_classes + 1, channels), channels),
            class_bias=Tensor(np.zeros(num_classes + 1), requires_grad=True),
            box_weight=proj((4, channels), channels),
            box_bias=Tensor(np.zeros(4), requires_grad=True),
        )

    @property
    def num_queries(self) -> int:
        return self.queries.data.shape[0]

    def named(self):
        return [("decoder.queries", self.queries),
                ("decoder.wq", self.wq), ("decoder.wk", self.wk),
                ("decoder.wv", self.wv), ("decoder.wo", self.wo),
                ("decoder.class_head.weight", self.class_weight),
                ("decoder.class_head.bias", self.class_bias),
                ("decoder.box_head.weight", self.box_weight),
                ("decoder.box_head.bias", self.box_bias)]

    def forward(self, p: List[Tensor]):
        """Cross-attend the query bank to every level's tokens.

        Returns (class_logits (N, num_classes+1), boxes (N, 4)); boxes are
        sigmoid-squashed so every component lies in (0, 1).
        """
        token_blocks, pos_blocks = [], []
        for lv in p:
            c, h, w = lv.data.shape
            token_blocks.append(T.transpose2d(T.reshape(lv, (c, h * w))))
            pos_blocks.append(cached_pos_encoding(h, w, c))
        tokens = T.concat(token_blocks, axis=0) if len(token_blocks) > 1 else token_blocks[0]
        pos = Tensor(np.concatenate(pos_blocks, axis=0))
        c = tokens.data.shape[1]
        q = T.linear(self.queries, self.wq)
        k = T.linear(T.add(tokens, pos), self.wk)
        v = T.linear(tokens, self.wv)
        attn = T.softmax_axis(T.mul(T.matmul(q, T.transpose2d(k)), 1.0 / math.sqrt(c)), axis=1)
        hidden = T.add(self.queries, T.linear(T.matmul(attn, v), self.wo))
        logits = T.linear(hidden, self.class_weight, self.class_bias)
        boxes = T.sigmoid(T.linear(hidden, self.box_weight, self.box_bias))
        return logits, boxes
