"""Losses that push convolution channels toward local, distinct responses.

Two differentiable penalties: one decorrelates the filters of a convolution
layer column by column, the other decorrelates the spatial response maps the
filters produce. Both use cosine similarity with an epsilon-guarded
denominator, and both count ordered pairs (i, j) with i != j.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor, absolute, div, einsum_pair, flatten  # noqa: F401
from .tensor import add, mul, reshape, sqrt, sub, tsum

log = logging.getLogger(__name__)

COLUMN_MODES = ("kernel_cols", "kernel_rows")


@dataclass
class FilterBank:
    """Convolution weights (c_out, c_in, kh, kw) viewed as per-filter columns.

    Under ``kernel_cols`` each filter is reshaped row-major to a
    (c_in*kh, kw) matrix, so column p collects the weights at kernel
    x-offset p. ``kernel_rows`` swaps the spatial axes first, indexing
    columns by kernel y-offset instead.
    """

    weights: Tensor
    column_mode: str = "kernel_cols"

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise ContractError(
                f"FilterBank expects 4-D weights, got shape {self.weights.shape}"
            )
        if self.column_mode not in COLUMN_MODES:
            raise ContractError(
                f"unknown column_mode {self.column_mode!r}, expected one of {COLUMN_MODES}"
            )

    def column_view(self) -> Tensor:
        """Pure reshape to (c_out, c_in*k, k); column index is the kernel offset."""
        c_out, c_in, kh, kw = self.weights.shape
        w = self.weights
        if self.column_mode == "kernel_rows":
            w = w.transpose(0, 1, 3, 2)
            kh, kw = kw, kh
        return reshape(w, (c_out, c_in * kh, kw))


@dataclass
class ResponseSet:
    """A batch of response maps (n, c, h, w) from the regularized layer."""

    responses: Tensor

    def __post_init__(self):
        if self.responses.data.ndim != 4:
            raise ContractError(
                f"ResponseSet expects 4-D responses, got shape {self.responses.shape}"
            )

    def flattened(self) -> Tensor:
        n, c, h, w = self.responses.shape
        return reshape(self.responses, (n, c, h * w))


def filter_orthogonal_loss(bank: FilterBank, epsilon: float = 1e-8) -> Tensor:
    """Sum over ordered filter pairs of |sum_p cos(w_i^p, w_j^p)|."""
    c_out = bank.weights.shape[0]
    if c_out < 2:
        raise ContractError(f"filter_orthogonal_loss needs >= 2 filters, got {c_out}")
    cv = bank.column_view()
    sq = einsum_pair("aqp,aqp->ap", cv, cv)
    if np.any(sq.data <= 0.0):
        log.warning(
            "filter_orthogonal_loss: %d zero-norm columns guarded by epsilon",
            int(np.sum(sq.data <= 0.0)),
        )
    norms = sqrt(sq)
    gram = einsum_pair("aqp,bqp->abp", cv, cv)
    denom = add(
        mul(reshape(norms, (c_out, 1, -1)), reshape(norms, (1, c_out, -1))),
        Tensor(np.asarray(epsilon)),
    )
    pair_sums = tsum(div(gram, denom), axis=2)
    off_diag = Tensor(1.0 - np.eye(c_out))
    return tsum(mul(absolute(pair_sums), off_diag))


def response_orthogonal_loss(rset: ResponseSet, epsilon: float = 1e-8) -> Tensor:
    """Batch mean over samples of sum_{i != j} cos(f_i, f_j)^2."""
    n, c, _, _ = rset.responses.shape
    if c < 2:
        raise ContractError(f"response_orthogonal_loss needs >= 2 channels, got {c}")
    f = rset.flattened()
    sq = einsum_pair("ncd,ncd->nc", f, f)
    norms = sqrt(sq)
    gram = einsum_pair("ncd,ned->nce", f, f)
    denom = add(
        mul(reshape(norms, (n, c, 1)), reshape(norms, (n, 1, c))),
        Tensor(np.asarray(epsilon)),
    )
    cos = div(gram, denom)
    off_diag = Tensor((1.0 - np.eye(c)).reshape(1, c, c))
    per_sample = tsum(mul(mul(cos, cos), off_diag))
    return mul(per_sample, Tensor(np.asarray(1.0 / n)))


def pairwise_column_cosine_sums(weights: np.ndarray, column_mode: str = "kernel_cols") -> np.ndarray:
    """Numpy diagnostic: the (c_out, c_out) matrix of per-pair column cosine sums."""
    c_out, c_in, kh, kw = weights.shape
    w = weights
    if column_mode == "kernel_rows":
        w = w.transpose(0, 1, 3, 2)
        kh, kw = kw, kh
    cv = w.reshape(c_out, c_in * kh, kw)
    norms = np.sqrt(np.einsum("aqp,aqp->ap", cv, cv))
    gram = np.einsum("aqp,bqp->abp", cv, cv)
    denom = norms[:, None, :] * norms[None, :, :] + 1e-8
    return (gram / denom).sum(axis=2)


def mean_abs_pairwise_response_cosine(responses: np.ndarray, epsilon: float = 1e-8) -> float:
    """Mean over samples and ordered channel pairs of |cos(f_i, f_j)|."""
    n, c = responses.shape[0], responses.shape[1]
    f = responses.reshape(n, c, -1)
    norms = np.sqrt(np.einsum("ncd,ncd->nc", f, f))
    gram = np.einsum("ncd,ned->nce", f, f)
    cos = gram / (norms[:, :, None] * norms[:, None, :] + epsilon)
    off = ~np.eye(c, dtype=bool)
    return float(np.mean([np.abs(cos[t][off]).mean() for t in range(n)]))


def channel_response_heatmap(rset: ResponseSet, channel: int) -> np.ndarray:
    """Batch-averaged, min-max normalized spatial map of one channel."""
    n, c, h, w = rset.responses.shape
    if channel >= c:
        raise ContractError(f"channel {channel} out of range for {c} channels")
    heat = rset.responses.data[:, channel].mean(axis=0)
    lo, hi = heat.min(), heat.max()
    if hi - lo == 0.0:
        log.warning("channel_response_heatmap: channel %d is constant, emitting zeros", channel)
        return np.zeros((h, w))
    return (heat - lo) / (hi - lo)


def write_heatmap_pgm(path, heat: np.ndarray) -> None:
    """Export a [0,1] map as a binary portable graymap."""
    levels = np.clip(np.round(heat * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{heat.shape[1]} {heat.shape[0]}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())
