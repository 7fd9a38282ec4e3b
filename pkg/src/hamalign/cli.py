"""Command-line entry points: train, eval, gradcheck, sweep-k,
dump-attention, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .metrics import evaluate_ap
from .model import DetectorModel
from .rasters import dump_attention
from .rng import CounterRng
from .scenes import GeneratorConfig, gen_eval_batch, render_scene, sample_scene
from .training import ablate, sweep_k, train


def _load_config(path) -> TrainConfig:
    return TrainConfig.from_json(path) if path else TrainConfig()


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    records, _ = train(cfg, args.out)
    final = records[-1]
    print(f"trained {cfg.epochs} epochs: l_det {final.l_det:.4f} "
          f"target_ap {_opt(final.target_ap)} source_ap {_opt(final.source_ap)}")
    print(f"outputs in {args.out}")
    return 0


def _opt(v):
    return "n/a" if v is None else f"{v:.4f}"


def cmd_eval(args) -> int:
    model = DetectorModel.from_checkpoint(args.ckpt)
    meta = model.generator_meta
    gen = GeneratorConfig(image_size=model.image_size, num_classes=model.num_classes,
                          fog_lift=meta.get("fog_lift", 0.3),
                          blur_sigma=meta.get("blur_sigma", 1.0),
                          noise_amp=meta.get("noise_amp", 0.02),
                          max_objects=min(5, model.N))
    ap = evaluate_ap(model, args.domain, args.count, 0.5, CounterRng(args.seed), gen)
    print(f"{args.domain} AP@0.5 over {args.count} scenes: {_opt(ap)}")
    return 0


def cmd_gradcheck(args) -> int:
    """Run finite-difference checks on the primitives and a small composite."""
    from .adversarial import GrlConfig
    from .model import DetectorModel
    from .detection import detection_loss, match, gts_to_arrays
    from .detection import GroundTruthObject

    rng = CounterRng(args.seed)
    failures = []

    def report(name, err, tol=1e-4):
        status = "ok" if err < tol else "FAIL"
        print(f"  {name:<28} max rel err {err:.3e}  {status}")
        if err >= tol:
            failures.append(name)

    print("primitive operations:")
    x0 = rng.uniform((4, 3, 3), -1, 1)
    cases = {
        "add/mul/sigmoid": lambda t: T.sum_all(T.mul(T.sigmoid(t), T.add(t, 0.5))),
        "group_norm": lambda t: T.sum_all(T.mul(T.group_norm(t, 2), T.sigmoid(t))),
        "softmax": lambda t: T.sum_all(T.mul(T.softmax_axis(t, 0), t)),
        "global_avg_pool": lambda t: T.sum_all(T.mul(T.global_avg_pool(t), T.Tensor(rng.uniform((4, 1, 1))))),
        "channel_shuffle": lambda t: T.sum_all(T.mul(T.channel_shuffle(t, 2), t)),
        "conv2d": lambda t: T.sum_all(T.conv2d(t, T.Tensor(rng.uniform((2, 4, 3, 3), -1, 1)),
                                               T.Tensor(rng.uniform((2,), -1, 1)), 1, 1)),
    }
    for name, fn in cases.items():
        report(name, T.grad_check(fn, T.Tensor(x0), 1e-5))

    print("composite detector + alignment (C=8, 16x16 image):")
    model = DetectorModel(C=8, L=2, N=4, num_classes=3, image_size=16, K=2,
                          cam_mode="full", use_lam=True, use_disc=True,
                          rng=rng.child(7))
    gts = [GroundTruthObject(1, (0.5, 0.5, 0.4, 0.4))]

    from .adversarial import adversarial_loss, discriminator_forward
    from .tensor import grl

    def composite(img):
        logits, boxes, f, p = model.detect(img)
        cls, bxs = gts_to_arrays(gts)
        assign = match(logits.data, boxes.data, cls, bxs)
        l_det = detection_loss(logits, boxes, cls, bxs, assign)
        v = model.alignment_features(f, p)
        prob = discriminator_forward(grl(v, 0.1), model.disc)
        l_adv = T.log(T.clamp(prob, 1e-7, 1 - 1e-7))
        return T.sub(l_det, T.mul(l_adv, 0.1))

    img0 = rng.uniform((3, 16, 16))
    sample = [int(v) for v in rng.uniform((40,), 0, 3 * 16 * 16)]
    report("image -> L_det - 0.1*L_adv", T.grad_check(composite, T.Tensor(img0), 1e-5,
                                                      coords=sorted(set(sample))))
    if failures:
        print(f"FAILED: {', '.join(failures)}")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_sweep_k(args) -> int:
    cfg = _load_config(args.config)
    k_values = [int(v) for v in args.k.split(",") if v.strip()]
    rows = sweep_k(cfg, k_values, args.out)
    for k, ap in rows:
        print(f"K={k}: target AP {_opt(ap)}")
    return 0


def cmd_dump_attention(args) -> int:
    model = DetectorModel.from_checkpoint(args.ckpt)
    meta = model.generator_meta
    gen = GeneratorConfig(image_size=model.image_size, num_classes=model.num_classes,
                          fog_lift=meta.get("fog_lift", 0.3),
                          blur_sigma=meta.get("blur_sigma", 1.0),
                          noise_amp=meta.get("noise_amp", 0.02),
                          max_objects=min(5, model.N))
    rng = CounterRng(args.image_seed)
    scene = sample_scene(rng, gen)
    scene.domain = "target"
    image = render_scene(scene, gen, rng)
    paths = dump_attention(model, image, args.out)
    for p in paths:
        print(p)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    results = ablate(cfg, args.out)
    for row in results:
        print(f"{row['config']:<16} target AP {_opt(row['target_ap'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hamalign",
        description="Domain-adaptive toy detector with hybrid attention alignment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", type=Path, default=None, help="TrainConfig JSON path")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint's AP@0.5")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--domain", choices=("source", "target"), required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sweep-k", help="train/evaluate across CAM group counts")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--k", type=str, required=True, help="comma list, e.g. 1,2,4")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_sweep_k)

    p = sub.add_parser("dump-attention", help="write attention rasters as PGM")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image-seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_dump_attention)

    p = sub.add_parser("ablate", help="run the six alignment-path ablations")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
