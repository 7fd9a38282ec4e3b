"""Run configuration: hyperparameters, schedule, ablation flags, generator.

The JSON schema uses exactly the field names below ("lambda" maps to the
`lambda_` attribute because of the Python keyword). Validation happens at
run entry, not construction, so a config object can hold the documented
defaults (K = 32) even where a particular run needs a different K to satisfy
the divisibility constraint C % 2K == 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .tensor import ConfigurationError


@dataclass
class TrainConfig:
    K: int = 32
    lambda_: float = 0.1
    L: int = 2
    C: int = 16
    N: int = 8
    num_classes: int = 3
    image_size: int = 64
    epochs: int = 30
    phase2_epoch: int = 24
    lr_phase1: float = 0.1
    lr_phase2: float = 0.01
    seed: int = 0
    direct_align: bool = True
    cam_no_split: bool = False
    cam_no_shuffle: bool = False
    cam_full: bool = True
    lam: bool = True
    batch_size: int = 8
    steps_per_epoch: int = 4
    eval_scenes: int = 16
    fog_lift: float = 0.3
    blur_sigma: float = 1.0
    noise_amp: float = 0.02
    param_mode: str = "paper-literal"
    gn_eps: float = 1e-5
    no_object_weight: float = 0.1

    def validate(self):
        """Reject invalid configurations before any work is done."""
        if self.L < 1:
            raise ConfigurationError(f"config: L must be >= 1, got {self.L}")
        if self.C < 4 or self.C % 4:
            raise ConfigurationError(f"config: C must be a positive multiple of 4, got {self.C}")
        if self.K < 1 or self.C % (2 * self.K):
            raise ConfigurationError(
                f"config: C={self.C} must be divisible by 2K={2 * self.K} "
                f"(valid K for C={self.C}: {valid_k_values(self.C)})")
        if self.lambda_ < 0:
            raise ConfigurationError(f"config: lambda must be >= 0, got {self.lambda_}")
        if self.image_size % (1 << self.L):
            raise ConfigurationError(
                f"config: image_size={self.image_size} must be divisible by 2^L={1 << self.L}")
        if self.N < 1 or self.num_classes < 1:
            raise ConfigurationError("config: N and num_classes must be positive")
        if self.epochs < 1 or not (0 <= self.phase2_epoch < self.epochs):
            raise ConfigurationError(
                f"config: need 0 <= phase2_epoch < epochs, got {self.phase2_epoch}, {self.epochs}")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigurationError("config: learning rates must be positive")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.eval_scenes < 1:
            raise ConfigurationError("config: batch_size, steps_per_epoch, eval_scenes must be >= 1")
        cam_flags = [self.cam_no_split, self.cam_no_shuffle, self.cam_full]
        if sum(cam_flags) > 1:
            raise ConfigurationError("config: at most one of cam_no_split, cam_no_shuffle, "
                                     "cam_full may be set")
        if (any(cam_flags) or self.lam) and not self.direct_align:
            raise ConfigurationError("config: cam_*/lam flags need direct_align "
                                     "(the alignment branch) enabled")
        if self.param_mode not in ("paper-literal", "broadcast"):
            raise ConfigurationError(f"config: unknown param_mode {self.param_mode!r}")
        if self.fog_lift < 0 or self.blur_sigma < 0 or self.noise_amp < 0:
            raise ConfigurationError("config: generator settings must be non-negative")
        if not (0 <= self.no_object_weight <= 1):
            raise ConfigurationError(
                f"config: no_object_weight must be in [0,1], got {self.no_object_weight}")
        return self

    @property
    def cam_mode(self):
        if self.cam_full:
            return "full"
        if self.cam_no_split:
            return "no_split"
        if self.cam_no_shuffle:
            return "no_shuffle"
        return None

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {("lambda" if f.name == "lambda_" else f.name): f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigurationError(f"config: unknown field {key!r}")
            kwargs[known[key]] = value
        return cls(**kwargs)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def valid_k_values(c: int):
    return [k for k in (1, 2, 4, 8, 16, 32, 64) if c % (2 * k) == 0]
