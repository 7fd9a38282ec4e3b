"""Experiment driver: two-phase training, probes, K sweeps, ablation grid.

Every source of randomness is a labeled child of the config seed, so two
runs of the same config produce byte-identical metrics and checkpoints, and
structural variants (with or without the alignment branch) consume identical
data streams for the shared components.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .adversarial import Discriminator, GrlConfig, Sgd, adversarial_loss, \
    discriminator_forward, train_step
from .config import TrainConfig
from .metrics import MetricsRecord, evaluate_ap, write_metrics_csv
from .model import DetectorModel
from .rng import CounterRng
from .scenes import GeneratorConfig, gen_domain_batch
from .tensor import ConfigurationError

log = logging.getLogger("hamalign")

# rng stream labels
_MODEL, _DATA, _EVAL, _PROBE = 1, 2, 3, 4


def train(cfg: TrainConfig, out_dir=None, on_epoch=None
          ) -> Tuple[List[MetricsRecord], DetectorModel]:
    """Run the two-phase schedule; returns per-epoch records and the model.

    With `out_dir` set, writes metrics.csv and checkpoint.hamc there.
    `on_epoch(model, record)` is called after each epoch's bookkeeping.
    """
    cfg.validate()
    root = CounterRng(cfg.seed)
    model = DetectorModel.from_train_config(cfg, root.child(_MODEL))
    gen = GeneratorConfig.from_train_config(cfg)
    data_base = root.child(_DATA)
    eval_base = root.child(_EVAL)
    opt = Sgd(cfg.lr_phase1)
    grl_cfg = GrlConfig(cfg.lambda_)

    records = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        opt.lr = cfg.lr_phase1 if epoch < cfg.phase2_epoch else cfg.lr_phase2
        epoch_rng = data_base.child(epoch)
        ldets, ladvs = [], []
        for step in range(cfg.steps_per_epoch):
            s_imgs, s_gts = gen_domain_batch("source", cfg.batch_size,
                                             epoch_rng.child(2 * step), gen)
            t_imgs, _ = gen_domain_batch("target", cfg.batch_size,
                                         epoch_rng.child(2 * step + 1), gen)
            l_det, l_adv = train_step(model, s_imgs, s_gts, t_imgs, grl_cfg, opt)
            ldets.append(l_det)
            if l_adv is not None:
                ladvs.append(l_adv)
        erng = eval_base.child(epoch)
        disc_acc = discriminator_accuracy(model, cfg.eval_scenes, erng.child(1), gen) \
            if model.disc is not None else None
        target_ap = evaluate_ap(model, "target", cfg.eval_scenes, 0.5, erng.child(2), gen)
        source_ap = evaluate_ap(model, "source", cfg.eval_scenes, 0.5, erng.child(3), gen)
        rec = MetricsRecord(epoch=epoch, l_det=float(np.mean(ldets)),
                            l_adv=float(np.mean(ladvs)) if ladvs else None,
                            disc_acc=disc_acc, target_ap=target_ap, source_ap=source_ap,
                            seconds=time.perf_counter() - started)
        records.append(rec)
        log.info("epoch %d l_det %.4f l_adv %s target_ap %s (%.2fs)", epoch, rec.l_det,
                 "-" if rec.l_adv is None else f"{rec.l_adv:.4f}",
                 "-" if rec.target_ap is None else f"{rec.target_ap:.3f}", rec.seconds)
        if on_epoch is not None:
            on_epoch(model, rec)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", records)
        model.save(out / "checkpoint.hamc")
    return records, model


def _alignment_probs(model, disc, count, rng, gen):
    """Discriminator probabilities over fresh held-out batches, no grads."""
    probs, labels = [], []
    with T.no_grad():
        for domain, is_source in (("source", True), ("target", False)):
            images, _ = gen_domain_batch(domain, count, rng.child(0 if is_source else 1), gen)
            for img in images:
                f, p = model.features(img)
                v = model.alignment_features(f, p)
                probs.append(float(discriminator_forward(v, disc).data))
                labels.append(is_source)
    return np.array(probs), np.array(labels)


def discriminator_accuracy(model, count: int, rng: CounterRng, gen: GeneratorConfig,
                           disc: Optional[Discriminator] = None) -> float:
    """Fraction of held-out features the discriminator classifies correctly."""
    disc = disc if disc is not None else model.disc
    probs, labels = _alignment_probs(model, disc, count, rng, gen)
    return float(np.mean((probs > 0.5) == labels))


def train_probe(model, rng: CounterRng, gen: GeneratorConfig, steps: int = 60,
                batch: int = 8, lr: float = 0.2) -> Discriminator:
    """Train a fresh discriminator on the (frozen) model's alignment features.

    Features are built once into a bank and detached; only the probe's own
    parameters move. Used to show that unaligned features stay separable.
    """
    probe = Discriminator.init(model.C, rng.child(0))
    bank, labels = [], []
    with T.no_grad():
        for domain, is_source in (("source", True), ("target", False)):
            images, _ = gen_domain_batch(domain, 4 * batch, rng.child(1 if is_source else 2), gen)
            for img in images:
                f, p = model.features(img)
                bank.append(model.alignment_features(f, p).data.copy())
                labels.append(is_source)
    bank = np.array(bank)
    labels = np.array(labels)
    opt = Sgd(lr)
    params = probe.parameters()
    order_rng = rng.child(3)
    for step in range(steps):
        idx = np.array([order_rng.randint(0, len(bank) - 1) for _ in range(batch)])
        p_src = [discriminator_forward(T.Tensor(bank[i]), probe) for i in idx if labels[i]]
        p_tgt = [discriminator_forward(T.Tensor(bank[i]), probe) for i in idx if not labels[i]]
        if not p_src or not p_tgt:
            continue
        loss = T.neg(adversarial_loss(p_src, p_tgt))
        opt.zero(params)
        T.backward(loss)
        opt.step(params)
    return probe


def sweep_k(cfg: TrainConfig, k_values, out_dir=None) -> List[Tuple[int, Optional[float]]]:
    """Train once per K (shared seed); invalid K values are skipped with a
    logged warning. Returns [(K, final target AP)] and optionally writes
    sweep_k.csv plus per-K run outputs."""
    rows = []
    for k in k_values:
        candidate = cfg.replace(K=int(k))
        try:
            candidate.validate()
        except ConfigurationError as exc:
            log.warning("sweep_k: skipping K=%s: %s", k, exc)
            continue
        run_dir = Path(out_dir) / f"k{k}" if out_dir is not None else None
        records, _ = train(candidate, run_dir)
        rows.append((int(k), records[-1].target_ap))
    if out_dir is not None:
        lines = ["K,target_ap"] + [
            f"{k},{'' if ap is None else f'{ap:.6f}'}" for k, ap in rows]
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep_k.csv").write_text("\n".join(lines) + "\n")
    return rows


ABLATION_ROWS = [
    ("direct_align", dict(cam_no_split=False, cam_no_shuffle=False, cam_full=False, lam=False)),
    ("cam_no_split", dict(cam_no_split=True, cam_no_shuffle=False, cam_full=False, lam=False)),
    ("cam_no_shuffle", dict(cam_no_split=False, cam_no_shuffle=True, cam_full=False, lam=False)),
    ("cam_full", dict(cam_no_split=False, cam_no_shuffle=False, cam_full=True, lam=False)),
    ("lam", dict(cam_no_split=False, cam_no_shuffle=False, cam_full=False, lam=True)),
    ("cam_full+lam", dict(cam_no_split=False, cam_no_shuffle=False, cam_full=True, lam=True)),
]


def ablate(cfg: TrainConfig, out_dir=None) -> List[dict]:
    """Run the six alignment configurations (shared seed and generator).

    Every row keeps the alignment branch on (direct_align) and varies the
    feature path fed to the discriminator. Returns one result dict per row
    and optionally writes ablation.csv plus per-row run outputs.
    """
    results = []
    for name, flags in ABLATION_ROWS:
        row_cfg = cfg.replace(direct_align=True, **flags)
        row_cfg.validate()
        run_dir = Path(out_dir) / name.replace("+", "_") if out_dir is not None else None
        records, _ = train(row_cfg, run_dir)
        final = records[-1]
        results.append({
            "config": name,
            "direct_align": True,
            "cam_no_split": flags["cam_no_split"],
            "cam_no_shuffle": flags["cam_no_shuffle"],
            "cam_full": flags["cam_full"],
            "lam": flags["lam"],
            "target_ap": final.target_ap,
            "source_ap": final.source_ap,
        })
    if out_dir is not None:
        header = "config,direct_align,cam_no_split,cam_no_shuffle,cam_full,lam,target_ap,source_ap"
        def fmt(v):
            if isinstance(v, bool):
                return "1" if v else "0"
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.6f}"
            return str(v)
        lines = [header] + [",".join(fmt(r[col]) for col in header.split(",")) for r in results]
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text("\n".join(lines) + "\n")
    return results
