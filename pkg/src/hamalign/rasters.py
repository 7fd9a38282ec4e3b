"""Attention visualization as binary PGM (P5) rasters.

Each level of a trained model yields two grayscale images: the spatial
attention map averaged over groups (H_l x W_l) and the channel attention
vector rendered as a one-row image. Values are min-max normalized to
[0, 255]; a constant map has zero range and is emitted as all zeros.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from . import ham, tensor as T
from .tensor import ConfigurationError


def write_pgm(path, values: np.ndarray):
    """Write a 2-D array as binary PGM (P5, maxval 255) after min-max scaling."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D array, got shape {arr.shape}")
    span = arr.max() - arr.min()
    if span > 0:
        scaled = np.round((arr - arr.min()) / span * 255.0)
    else:
        scaled = np.zeros_like(arr)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.astype(np.uint8).tobytes())


def read_pgm(path):
    """Parse a binary PGM written by write_pgm; returns a uint8 array."""
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    pixels = parts[4]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(pixels)} bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def dump_attention(model, image, out_dir) -> List[Path]:
    """Write per-level spatial and channel attention rasters for one image.

    Returns the list of written paths. The model must carry a coordinate
    attention stage (any CAM variant)."""
    if model.cam_params is None:
        raise ConfigurationError("dump_attention: model has no attention parameters "
                                 "(trained with an attention-free alignment path)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        f, p = model.features(image)
    written = []
    for level, (f_l, p_l, lp) in enumerate(zip(f, p, model.cam_params.levels), start=1):
        if model.cam_mode == "no_split":
            with T.no_grad():
                a_s = ham.spatial_attention(p_l, lp.w_s, lp.b_s, model.ham_cfg.gn_eps)
                a_c = ham.channel_attention(p_l, lp.w_c, lp.b_c)
            spatial = a_s.data.mean(axis=0)
            chan = a_c.data.reshape(-1)
        else:
            spatial, chan = ham.cam_attention_maps(f_l, p_l, lp, model.ham_cfg)
        spath = out / f"level{level}_spatial.pgm"
        cpath = out / f"level{level}_channel.pgm"
        write_pgm(spath, spatial)
        write_pgm(cpath, chan.reshape(1, -1))
        written += [spath, cpath]
    return written
