"""Baseline occlusion and dropout strategies used as comparison points.

Each strategy declares its domain: image-level ones transform the input
batch before the network, feature-level ones transform the feature map at
the model's insertion stage. All are training-time only and share the
``apply_images`` / ``apply_features`` interface so the harness can swap
them under an otherwise identical config and seed.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor, mul


class Cutout:
    """Zero one axis-aligned square box per image at a uniform interior position."""

    name = "cutout"
    domain = "image"

    def __init__(self, box_size: int):
        if box_size < 0:
            raise ContractError(f"box_size must be >= 0, got {box_size}")
        self.box_size = box_size

    def apply_images(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        b = self.box_size
        if b == 0:
            return images
        n, _, h, w = images.shape
        if b > h or b > w:
            raise ContractError(f"box_size {b} exceeds image size {h}x{w}")
        out = images.copy()
        for t in range(n):
            y = int(rng.integers(0, h - b + 1))
            x = int(rng.integers(0, w - b + 1))
            out[t, :, y : y + b, x : x + b] = 0.0
        return out


class ImageTemplate:
    """Gray-filled random rectangle per image, a crude occluder template."""

    name = "image_template"
    domain = "image"

    def __init__(self, size_min: float = 0.2, size_max: float = 0.5, fill: float = 0.5):
        if not (0.0 <= size_min <= size_max <= 1.0):
            raise ContractError(
                f"template size range [{size_min}, {size_max}] must lie in [0, 1]"
            )
        self.size_min = size_min
        self.size_max = size_max
        self.fill = fill

    def apply_images(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n, _, h, w = images.shape
        out = images.copy()
        for t in range(n):
            fh = rng.uniform(self.size_min, self.size_max)
            fw = rng.uniform(self.size_min, self.size_max)
            bh, bw = int(fh * h), int(fw * w)
            if bh == 0 or bw == 0:
                continue
            y = int(rng.integers(0, h - bh + 1))
            x = int(rng.integers(0, w - bw + 1))
            out[t, :, y : y + bh, x : x + bw] = self.fill
        return out


def dropblock_mask(
    h: int, w: int, block_size: int, drop_prob: float, rng: np.random.Generator
) -> np.ndarray:
    """One spatial mask: square blocks zeroed around Bernoulli seed positions.

    Seeds are drawn only where a full block fits; the seed density is scaled
    so the expected dropped fraction approximates drop_prob.
    """
    vh, vw = h - block_size + 1, w - block_size + 1
    gamma = drop_prob * (h * w) / (block_size**2 * vh * vw)
    seeds = rng.random((vh, vw)) < gamma
    mask = np.ones((h, w))
    ys, xs = np.nonzero(seeds)
    for y, x in zip(ys, xs):
        mask[y : y + block_size, x : x + block_size] = 0.0
    return mask


class DropBlock:
    """Zero contiguous square blocks across all channels, rescaling survivors."""

    name = "dropblock"
    domain = "feature"

    def __init__(self, block_size: int, drop_prob: float):
        if not (0.0 <= drop_prob <= 1.0):
            raise ContractError(f"drop_prob must lie in [0, 1], got {drop_prob}")
        if block_size < 1:
            raise ContractError(f"block_size must be >= 1, got {block_size}")
        self.block_size = block_size
        self.drop_prob = drop_prob

    def apply_features(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        if self.drop_prob == 0.0:
            return x
        n, c, h, w = x.data.shape
        if self.block_size > min(h, w):
            raise ContractError(
                f"block_size {self.block_size} exceeds feature size {h}x{w}"
            )
        masks = np.empty((n, 1, h, w))
        factors = np.empty((n, 1, 1, 1))
        total = h * w
        for t in range(n):
            m = dropblock_mask(h, w, self.block_size, self.drop_prob, rng)
            kept = m.sum()
            masks[t, 0] = m
            factors[t, 0, 0, 0] = total / kept if kept > 0 else 1.0
        out = mul(x, Tensor(masks * factors))
        out.op = "dropblock"
        return out


class WeightedChannelDropout:
    """Keep ~keep_ratio of the channels, biased toward high mean |activation|.

    Selection is a weighted top-k: channel i gets key u_i^(1/score_i) and
    the round(keep_ratio*c) largest keys survive, so high-magnitude
    channels are kept with higher probability while the kept count stays
    on target.
    """

    name = "wcd"
    domain = "feature"

    def __init__(self, keep_ratio: float):
        if not (0.0 < keep_ratio <= 1.0):
            raise ContractError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
        self.keep_ratio = keep_ratio

    def apply_features(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        n, c, _, _ = x.data.shape
        k = int(round(self.keep_ratio * c))
        if k >= c:
            return x
        k = max(k, 1)
        scores = np.abs(x.data).mean(axis=(2, 3))
        mask = np.zeros((n, c))
        for t in range(n):
            u = rng.random(c)
            keys = u ** (1.0 / (scores[t] + 1e-12))
            kept = np.argsort(keys)[-k:]
            mask[t, kept] = 1.0
        out = mul(x, Tensor(mask[:, :, None, None]))
        out.op = "wcd"
        return out


def build_strategy(name: str, **kwargs):
    registry = {
        "cutout": Cutout,
        "image_template": ImageTemplate,
        "dropblock": DropBlock,
        "wcd": WeightedChannelDropout,
    }
    if name not in registry:
        raise ContractError(f"unknown strategy {name!r}, expected one of {sorted(registry)}")
    return registry[name](**kwargs)
