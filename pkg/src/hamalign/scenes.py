"""Synthetic two-domain scenes: colored shapes on a noisy background.

Source scenes are rendered clean; target scenes get a fog-like additive
brightness lift plus Gaussian blur, a controllable stand-in for a
weather-style domain shift. Ground truth boxes are exact by construction.
Classes: 1 = square, 2 = disk, 3 = triangle, each with a distinct base
color so the classification task is learnable at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .detection import GroundTruthObject
from .rng import CounterRng

CLASS_COLORS = {
    1: (0.85, 0.25, 0.20),  # square
    2: (0.20, 0.80, 0.25),  # disk
    3: (0.25, 0.35, 0.90),  # triangle
}
MAX_OBJECTS = 5


@dataclass
class GeneratorConfig:
    image_size: int = 64
    num_classes: int = 3
    fog_lift: float = 0.3
    blur_sigma: float = 1.0
    noise_amp: float = 0.02
    max_objects: int = MAX_OBJECTS

    @classmethod
    def from_train_config(cls, cfg) -> "GeneratorConfig":
        return cls(image_size=cfg.image_size, num_classes=cfg.num_classes,
                   fog_lift=cfg.fog_lift, blur_sigma=cfg.blur_sigma,
                   noise_amp=cfg.noise_amp, max_objects=min(MAX_OBJECTS, cfg.N))


@dataclass
class SceneSpec:
    objects: List[GroundTruthObject]
    domain: str                      # "source" | "target"
    background: float
    color_jitter: List[float]


def sample_scene(rng: CounterRng, gen: GeneratorConfig) -> SceneSpec:
    """Draw 0..max_objects shapes with boxes inside the unit square."""
    n = rng.randint(0, gen.max_objects)
    shapes = min(3, gen.num_classes)
    objects, jitter = [], []
    for _ in range(n):
        cls = rng.randint(1, shapes)
        w = float(rng.uniform((), 0.2, 0.45))
        h = float(rng.uniform((), 0.2, 0.45))
        cx = float(rng.uniform((), w / 2, 1.0 - w / 2))
        cy = float(rng.uniform((), h / 2, 1.0 - h / 2))
        objects.append(GroundTruthObject(class_id=cls, box=(cx, cy, w, h)))
        jitter.append(float(rng.uniform((), -0.1, 0.1)))
    background = float(rng.uniform((), 0.10, 0.20))
    return SceneSpec(objects=objects, domain="source", background=background,
                     color_jitter=jitter)


def _shape_mask(cls: int, box, size: int) -> np.ndarray:
    cx, cy, w, h = box
    coords = (np.arange(size) + 0.5) / size
    yy = coords[:, None]
    xx = coords[None, :]
    if cls == 1:  # square: the box itself
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
    if cls == 2:  # disk inscribed in the box
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    # upward triangle: apex at the top edge center, base at the bottom edge
    t = (yy - (cy - h / 2)) / h
    inside_rows = (t >= 0.0) & (t <= 1.0)
    return inside_rows & (np.abs(xx - cx) <= t * (w / 2))


def render_scene(scene: SceneSpec, gen: GeneratorConfig, rng: CounterRng) -> np.ndarray:
    """(3, S, S) image in [0, 1]; target domain applies blur then fog lift."""
    s = gen.image_size
    img = np.full((3, s, s), scene.background)
    img += gen.noise_amp * rng.normal((3, s, s))
    for obj, jit in zip(scene.objects, scene.color_jitter):
        mask = _shape_mask(obj.class_id, obj.box, s)
        color = np.asarray(CLASS_COLORS[obj.class_id]) * (1.0 + jit)
        img[:, mask] = color[:, None]
    if scene.domain == "target":
        if gen.blur_sigma > 0:
            img = gaussian_filter(img, sigma=(0.0, gen.blur_sigma, gen.blur_sigma))
        img = img + gen.fog_lift
    return np.clip(img, 0.0, 1.0)


def gen_domain_batch(domain: str, count: int, rng: CounterRng, gen: GeneratorConfig
                     ) -> Tuple[np.ndarray, Optional[List[List[GroundTruthObject]]]]:
    """Deterministic batch; labels are returned for the source domain only
    (the target domain trains unsupervised)."""
    images, labels = _generate(domain, count, rng, gen)
    return images, (labels if domain == "source" else None)


def gen_eval_batch(domain: str, count: int, rng: CounterRng, gen: GeneratorConfig):
    """Like gen_domain_batch but always returns labels (evaluation only)."""
    return _generate(domain, count, rng, gen)


def _generate(domain: str, count: int, rng: CounterRng, gen: GeneratorConfig):
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    if count < 1:
        raise ValueError(f"batch count must be >= 1, got {count}")
    images = np.empty((count, 3, gen.image_size, gen.image_size))
    labels = []
    for i in range(count):
        scene = sample_scene(rng, gen)
        scene.domain = domain
        images[i] = render_scene(scene, gen, rng)
        labels.append(scene.objects)
    return images, labels
