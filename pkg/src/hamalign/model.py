"""The full domain-adaptive detector: parts, parameter registry, checkpoints.

Detection path: image -> backbone -> encoder -> decoder -> set loss.
Alignment path: (backbone levels, encoder levels) -> attention stack (or
identity, per the ablation flags) -> one fused map -> discriminator. The
attention parameters only ever receive gradient through the alignment
branch; the two paths share the backbone and encoder.

Checkpoints store every parameter under a stable name plus a handful of
"meta.*" scalar records, enough to rebuild the model (and its evaluation
scene distribution) from the file alone.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from . import detection, ham, tensor as T
from .adversarial import Discriminator
from .checkpoint import read_checkpoint, write_checkpoint
from .detector import BackboneNet, DecoderHead, EncoderNet
from .rng import CounterRng
from .tensor import ConfigurationError, Tensor

CAM_MODES = (None, "full", "no_split", "no_shuffle")
_CAM_MODE_CODE = {None: 0.0, "full": 1.0, "no_split": 2.0, "no_shuffle": 3.0}
_PARAM_MODE_CODE = {"paper-literal": 0.0, "broadcast": 1.0}


class DetectorModel:
    def __init__(self, C: int, L: int, N: int, num_classes: int, image_size: int,
                 K: int = 2, cam_mode: Optional[str] = None, use_lam: bool = False,
                 use_disc: bool = False, param_mode: str = "paper-literal",
                 gn_eps: float = 1e-5, shuffle_sub_groups: int = 2,
                 no_object_weight: float = 0.1, rng: Optional[CounterRng] = None,
                 generator_meta: Optional[dict] = None):
        if cam_mode not in CAM_MODES:
            raise ConfigurationError(f"unknown cam_mode {cam_mode!r}")
        if image_size % (1 << L):
            raise ConfigurationError(f"image_size {image_size} not divisible by 2^{L}")
        self.C, self.L, self.N = C, L, N
        self.num_classes = num_classes
        self.image_size = image_size
        self.K = K
        self.cam_mode = cam_mode
        self.use_lam = use_lam
        self.param_mode = param_mode
        self.no_object_weight = no_object_weight
        self.generator_meta = dict(generator_meta or {})
        self.level_shapes = [(image_size >> (l + 1), image_size >> (l + 1)) for l in range(L)]
        self.ham_cfg = ham.HamConfig(K=K, L=L, C=C, gn_eps=gn_eps, param_mode=param_mode,
                                     shuffle_sub_groups=shuffle_sub_groups) \
            if (cam_mode is not None or use_lam) else None

        rng = rng or CounterRng(0)
        self.backbone = BackboneNet.init(L, C, rng.child(1))
        self.encoder = EncoderNet.init(L, C, rng.child(2))
        self.decoder = DecoderHead.init(N, C, num_classes, rng.child(3))
        self.cam_params = None
        if cam_mode in ("full", "no_shuffle"):
            self.cam_params = ham.CamParams(
                [ham.init_cam_level(self.ham_cfg, res) for res in self.level_shapes])
        elif cam_mode == "no_split":
            self.cam_params = ham.CamParams(
                [ham.init_cam_level(self.ham_cfg, res, channels=C) for res in self.level_shapes])
        self.lam_params = ham.init_lam(self.ham_cfg, rng.child(4)) if use_lam else None
        self.disc = Discriminator.init(C, rng.child(5)) if use_disc else None

    @classmethod
    def from_train_config(cls, cfg, rng: CounterRng) -> "DetectorModel":
        return cls(C=cfg.C, L=cfg.L, N=cfg.N, num_classes=cfg.num_classes,
                   image_size=cfg.image_size, K=cfg.K, cam_mode=cfg.cam_mode,
                   use_lam=cfg.lam, use_disc=cfg.direct_align, param_mode=cfg.param_mode,
                   gn_eps=cfg.gn_eps, no_object_weight=cfg.no_object_weight, rng=rng,
                   generator_meta={"fog_lift": cfg.fog_lift, "blur_sigma": cfg.blur_sigma,
                                   "noise_amp": cfg.noise_amp})

    # -- parameter registry ------------------------------------------------

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = self.backbone.named() + self.encoder.named() + self.decoder.named()
        if self.cam_params is not None:
            out += self.cam_params.named()
        if self.lam_params is not None:
            out += self.lam_params.named()
        if self.disc is not None:
            out += self.disc.named()
        return out

    def parameter_tensors(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def detector_parameters(self) -> List[Tuple[str, Tensor]]:
        """The detection-path parameters (backbone, encoder, decoder) only."""
        return self.backbone.named() + self.encoder.named() + self.decoder.named()

    # -- forward paths -----------------------------------------------------

    def features(self, image) -> Tuple[List[Tensor], List[Tensor]]:
        img = image if isinstance(image, Tensor) else Tensor(image)
        f = self.backbone.forward(img)
        p = self.encoder.forward(f)
        return f, p

    def detect(self, image, features=None):
        f, p = features if features is not None else self.features(image)
        logits, boxes = self.decoder.forward(p)
        return logits, boxes, f, p

    def detection_loss(self, image, gts, keep_features: bool = False):
        logits, boxes, f, p = self.detect(image)
        gt_classes, gt_boxes = detection.gts_to_arrays(gts)
        assign = detection.match(logits.data, boxes.data, gt_classes, gt_boxes)
        loss = detection.detection_loss(logits, boxes, gt_classes, gt_boxes, assign,
                                        self.no_object_weight)
        return (loss, (f, p)) if keep_features else loss

    def alignment_features(self, f: List[Tensor], p: List[Tensor]) -> Tensor:
        """The map fed to the discriminator, per the ablation flags:
        identity / coordinate-attention variants per level, then level
        attention or a plain mean across (resampled) levels."""
        if self.cam_mode is None:
            fhat = f
        elif self.cam_mode == "no_split":
            fhat = [ham.cam_forward_unsplit(f_l, p_l, lp, self.ham_cfg)
                    for f_l, p_l, lp in zip(f, p, self.cam_params.levels)]
        else:
            fhat = [ham.cam_forward(f_l, p_l, lp, self.ham_cfg,
                                    use_shuffle=(self.cam_mode == "full"))
                    for f_l, p_l, lp in zip(f, p, self.cam_params.levels)]
        levels = ham.resample_to_coarsest(fhat)
        if self.use_lam:
            return ham.lam_forward(levels, self.lam_params, self.ham_cfg)
        out = levels[0]
        for lv in levels[1:]:
            out = T.add(out, lv)
        return T.mul(out, 1.0 / len(levels))

    def predict(self, image) -> List[detection.BoxPrediction]:
        with T.no_grad():
            logits, boxes, _, _ = self.detect(image)
        return [detection.BoxPrediction(class_logits=logits.data[i].copy(),
                                        box=tuple(boxes.data[i]))
                for i in range(self.N)]

    # -- checkpoints ---------------------------------------------------------

    def checkpoint_records(self):
        recs = [(name, t.data) for name, t in self.named_parameters()]
        meta = {
            "meta.image_size": float(self.image_size),
            "meta.num_classes": float(self.num_classes),
            "meta.K": float(self.K),
            "meta.cam_mode": _CAM_MODE_CODE[self.cam_mode],
            "meta.lam": float(self.use_lam),
            "meta.param_mode": _PARAM_MODE_CODE[self.param_mode],
            "meta.gn_eps": self.ham_cfg.gn_eps if self.ham_cfg else 1e-5,
            "meta.shuffle_sub_groups": float(self.ham_cfg.shuffle_sub_groups) if self.ham_cfg else 2.0,
            "meta.no_object_weight": float(self.no_object_weight),
        }
        for key in ("fog_lift", "blur_sigma", "noise_amp"):
            if key in self.generator_meta:
                meta[f"meta.{key}"] = float(self.generator_meta[key])
        recs += [(k, np.asarray(v)) for k, v in sorted(meta.items())]
        return recs

    def save(self, path):
        write_checkpoint(path, self.checkpoint_records())

    @classmethod
    def from_checkpoint(cls, path) -> "DetectorModel":
        data = read_checkpoint(path)
        meta = {k[5:]: float(v) for k, v in data.items() if k.startswith("meta.")}
        n_levels = sum(1 for k in data if k.startswith("backbone.conv") and k.endswith(".weight"))
        C = data["backbone.conv1.weight"].shape[0]
        N, _ = data["decoder.queries"].shape
        num_classes = data["decoder.class_head.weight"].shape[0] - 1
        cam_mode = {v: k for k, v in _CAM_MODE_CODE.items()}[meta.get("cam_mode", 0.0)]
        param_mode = {v: k for k, v in _PARAM_MODE_CODE.items()}[meta.get("param_mode", 0.0)]
        model = cls(C=C, L=n_levels, N=N, num_classes=num_classes,
                    image_size=int(meta.get("image_size", 64)),
                    K=int(meta.get("K", 1)), cam_mode=cam_mode,
                    use_lam="lam.fc_weight" in data,
                    use_disc="disc.fc.weight" in data,
                    param_mode=param_mode, gn_eps=meta.get("gn_eps", 1e-5),
                    shuffle_sub_groups=int(meta.get("shuffle_sub_groups", 2)),
                    no_object_weight=meta.get("no_object_weight", 0.1),
                    rng=CounterRng(0),
                    generator_meta={k: meta[k] for k in ("fog_lift", "blur_sigma", "noise_amp")
                                    if k in meta})
        for name, t in model.named_parameters():
            if name not in data:
                raise ConfigurationError(f"checkpoint {path} missing tensor {name!r}")
            if data[name].shape != t.data.shape:
                raise ConfigurationError(f"checkpoint tensor {name!r} has shape "
                                         f"{data[name].shape}, expected {t.data.shape}")
            t.data = data[name].copy()
        return model
