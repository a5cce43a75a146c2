"""Forward a single image and dump per-level activation maps."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

import numpy as np

from . import pyramid, tnsr
from .tensor import ShapeError


def load_image(path: str | os.PathLike) -> np.ndarray:
    image = tnsr.load(path)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[:2] != (1, 3):
        raise ShapeError(f"{path}: expected a 1 x 3 x H x W image, got {image.shape}")
    return image


def random_image(height: int, width: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((1, 3, height, width))


def run_demo(image: np.ndarray, dump_dir: str | os.PathLike, seed: int = 0,
             params: Mapping[str, np.ndarray] | None = None) -> dict[int, pyramid.FeatureMap]:
    """Run the full pipeline and write ``P2..P6.pgm`` plus ``stats.txt``.

    Parameters default to :func:`cafpn.pyramid.init_params` with ``seed``.
    """
    params = pyramid.init_params(seed) if params is None else params
    levels = pyramid.ca_fpn_forward(image, params)
    dump_dir = Path(dump_dir)
    pyramid.dump_activations(levels, dump_dir)
    lines = ["level shape min mean max"]
    for level in sorted(levels):
        t = levels[level].tensor
        shape = "x".join(str(d) for d in t.shape[1:])
        lines.append(f"P{level} {shape} {t.min():.6g} {t.mean():.6g} {t.max():.6g}")
    (dump_dir / "stats.txt").write_text("\n".join(lines) + "\n")
    return levels
