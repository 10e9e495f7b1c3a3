"""Channel-wise dropout that zeroes whole feature channels per sample.

Each training sample gets a drop count sampled uniformly from
[gamma_min, gamma_max]; that many distinct channels are zeroed across all
spatial positions. The operator is the identity at inference time, and
survivors are never rescaled. When the drop precedes batch normalization,
the statistics must exclude the dropped samples per channel; that corrected
normalization lives here too.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateChannelError, DimensionError
from .tensor import BatchStats, Tensor, add, div, mul, reshape, sqrt, sub, tsum

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GammaPolicy:
    """Range of per-sample drop counts plus the stream seed that samples them."""

    gamma_min: int
    gamma_max: int
    rng_seed: int = 0

    def __post_init__(self):
        if self.gamma_min < 0:
            raise ContractError(f"gamma_min must be >= 0, got {self.gamma_min}")
        if self.gamma_min > self.gamma_max:
            raise ContractError(
                f"gamma_min {self.gamma_min} exceeds gamma_max {self.gamma_max}"
            )

    def validate_for_channels(self, c: int) -> None:
        if self.gamma_max > c:
            raise ContractError(f"gamma_max {self.gamma_max} exceeds channel count {c}")

    @staticmethod
    def defaults_for_channels(c: int, rng_seed: int = 0) -> "GammaPolicy":
        """Drop between 10% and 60% of channels (floored), the recommended range."""
        return GammaPolicy(gamma_min=int(0.1 * c), gamma_max=int(0.6 * c), rng_seed=rng_seed)

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


@dataclass
class DropMask:
    """Binary mask (n,c,h,w), constant across spatial positions per channel."""

    mask: np.ndarray
    dropped_indices: list
    gamma: np.ndarray

    @property
    def channel_mask(self) -> np.ndarray:
        """The (n, c) keep/drop bits."""
        return self.mask[:, :, 0, 0]

    def dropped_sample_counts(self) -> np.ndarray:
        """Per channel, how many samples dropped it."""
        return (self.channel_mask == 0.0).sum(axis=0)


def sample_mask(
    n: int, c: int, h: int, w: int, policy: GammaPolicy, rng: np.random.Generator
) -> DropMask:
    """Draw per-sample drop counts and channel index sets, then build the mask."""
    policy.validate_for_channels(c)
    gamma = rng.integers(policy.gamma_min, policy.gamma_max + 1, size=n)
    bits = np.ones((n, c))
    dropped = []
    for t in range(n):
        idx = rng.choice(c, size=int(gamma[t]), replace=False)
        idx = np.sort(idx)
        bits[t, idx] = 0.0
        dropped.append(idx)
    mask = np.broadcast_to(bits[:, :, None, None], (n, c, h, w)).copy()
    return DropMask(mask=mask, dropped_indices=dropped, gamma=gamma)


def apply_lcd(x: Tensor, mask: DropMask, training: bool) -> Tensor:
    """Zero the masked channels in training mode; identity at inference."""
    if not training:
        return x
    if mask.mask.shape != x.data.shape:
        raise DimensionError(
            f"mask shape {mask.mask.shape} does not match input shape {x.data.shape}"
        )
    out = mul(x, Tensor(mask.mask))
    out.op = "lcd_apply"
    return out


def masked_batchnorm_stats(x, mask: DropMask) -> tuple:
    """Per-channel mean and variance over the samples that kept each channel.

    The mean divides the full-batch sum by (n - eta_i) * h * w, where eta_i
    counts the samples whose channel i was dropped (their entries are zero
    and contribute nothing to the sum). The variance is the analogous
    second moment, restricted to surviving samples' entries.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    n, c, h, w = data.shape
    eta = mask.dropped_sample_counts()
    if np.any(eta >= n):
        bad = np.nonzero(eta >= n)[0]
        raise DegenerateChannelError(
            f"every sample dropped channel(s) {bad.tolist()}; no surviving statistics"
        )
    counts = (n - eta) * h * w
    mean = data.sum(axis=(0, 2, 3)) / counts
    keep = mask.channel_mask[:, :, None, None]
    var = (keep * (data - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3)) / counts
    return mean, var


def masked_batchnorm_mean(x, mask: DropMask) -> np.ndarray:
    """The corrected per-channel batch mean under dropped channels."""
    mean, _ = masked_batchnorm_stats(x, mask)
    return mean


def masked_batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    mask: DropMask,
    stats: BatchStats,
    training: bool,
) -> Tensor:
    """Batch normalization whose statistics exclude dropped samples per channel.

    Dropped entries stay exactly zero: the mask is re-applied after the
    affine so the occlusion simulation survives the normalization. Channels
    dropped by every sample fall back to the running statistics (logged),
    and their running statistics are left untouched.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"masked_batchnorm expects 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    g = reshape(scale, (1, c, 1, 1))
    b = reshape(shift, (1, c, 1, 1))
    eps = Tensor(np.asarray(stats.epsilon, dtype=x.data.dtype))
    if not training:
        rm = Tensor(stats.running_mean.reshape(1, c, 1, 1).astype(x.data.dtype))
        rv = Tensor(stats.running_variance.reshape(1, c, 1, 1).astype(x.data.dtype))
        xhat = div(sub(x, rm), sqrt(add(rv, eps)))
        return add(mul(xhat, g), b)

    eta = mask.dropped_sample_counts()
    valid = eta < n
    if not np.all(valid):
        log.warning(
            "masked_batchnorm: %d channel(s) dropped by every sample; using running stats",
            int(np.sum(~valid)),
        )
    counts = np.maximum(n - eta, 1) * h * w
    inv_counts = Tensor((1.0 / counts).reshape(1, c, 1, 1).astype(x.data.dtype))
    keep = Tensor(mask.mask)
    valid_t = Tensor(valid.astype(x.data.dtype).reshape(1, c, 1, 1))
    fallback = Tensor((1.0 - valid).astype(x.data.dtype).reshape(1, c, 1, 1))
    rm = Tensor(stats.running_mean.reshape(1, c, 1, 1).astype(x.data.dtype))
    rv = Tensor(stats.running_variance.reshape(1, c, 1, 1).astype(x.data.dtype))

    u_masked = mul(tsum(x, axis=(0, 2, 3), keepdims=True), inv_counts)
    u = add(mul(u_masked, valid_t), mul(rm, fallback))
    xc = sub(x, u)
    var_masked = mul(tsum(mul(keep, mul(xc, xc)), axis=(0, 2, 3), keepdims=True), inv_counts)
    var = add(mul(var_masked, valid_t), mul(rv, fallback))

    stats.mean = u.data.reshape(c).copy()
    stats.variance = var.data.reshape(c).copy()
    stats.update_running(stats.mean, stats.variance, valid=valid)

    xhat = div(xc, sqrt(add(var, eps)))
    out = mul(add(mul(xhat, g), b), keep)
    out.op = "masked_batchnorm"
    return out
