"""Channel-reweighting attention over feature maps.

A 1x1 convolution aggregates spatial information (global average pooling is
deliberately avoided: pooling a zeroed channel loses the signal that it was
zeroed), two dense layers produce one weight per channel, and each channel
of the feature map is multiplied by its weight. Active in both training and
inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, conv2d, flatten, linear, mul, relu, reshape, sigmoid

SQUASH_MODES = ("logistic", "identity")


@dataclass
class SamParams:
    """Parameters of the attention stack; fc2 output width must equal the
    attended channel count."""

    conv1x1: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    squash: str = "logistic"

    def __post_init__(self):
        if self.squash not in SQUASH_MODES:
            raise ContractError(
                f"unknown squash {self.squash!r}, expected one of {SQUASH_MODES}"
            )

    @property
    def channels(self) -> int:
        return self.fc2_w.shape[0]

    def parameters(self) -> dict:
        return {
            "conv1x1": self.conv1x1,
            "fc1_w": self.fc1_w,
            "fc1_b": self.fc1_b,
            "fc2_w": self.fc2_w,
            "fc2_b": self.fc2_b,
        }

    @classmethod
    def create(
        cls,
        c: int,
        h: int,
        w: int,
        rng: np.random.Generator,
        c_mid: int | None = None,
        hidden: int | None = None,
        squash: str = "logistic",
    ) -> "SamParams":
        """Light-weight defaults: c_mid = c/4, hidden = c, zero-initialized
        final layer so an untrained module weights every channel equally."""
        from .backbone import fan_in_uniform

        c_mid = max(1, c // 4) if c_mid is None or c_mid <= 0 else c_mid
        hidden = c if hidden is None or hidden <= 0 else hidden
        flat = c_mid * h * w
        return cls(
            conv1x1=fan_in_uniform(rng, (c_mid, c, 1, 1), fan_in=c),
            fc1_w=fan_in_uniform(rng, (hidden, flat), fan_in=flat),
            fc1_b=Tensor(np.zeros(hidden), requires_grad=True),
            fc2_w=Tensor(np.zeros((c, hidden)), requires_grad=True),
            fc2_b=Tensor(np.zeros(c), requires_grad=True),
            squash=squash,
        )


def sam_forward(x: Tensor, params: SamParams) -> tuple:
    """Compute per-sample channel weights and the reweighted feature map."""
    n, c, h, w = x.data.shape
    if params.conv1x1.shape[1] != c:
        raise DimensionError(
            f"attention conv expects {params.conv1x1.shape[1]} channels, feature has {c}"
        )
    if params.channels != c:
        raise DimensionError(
            f"attention output width {params.channels} does not match {c} feature channels"
        )
    a = conv2d(x, params.conv1x1)
    hid = relu(linear(flatten(a), params.fc1_w, params.fc1_b))
    z = linear(hid, params.fc2_w, params.fc2_b)
    theta = sigmoid(z) if params.squash == "logistic" else z
    out = mul(x, reshape(theta, (n, c, 1, 1)))
    out.op = "sam_reweight"
    return theta, out


def sam_attention_report(model, images: np.ndarray, forced_masks: np.ndarray) -> dict:
    """Mean channel weights on clean inputs versus inputs with forced drops.

    ``forced_masks`` is an (n, c) binary array marking the channels zeroed
    per sample; the report aggregates the mean weight each channel receives
    in both passes and the mean weight over dropped versus intact slots.
    """
    _, trace_clean = model.forward(Tensor(images), training=False)
    if trace_clean.theta is None:
        raise ContractError("model has no attention module to report on")
    _, trace_drop = model.forward(Tensor(images), training=False, forced_mask=forced_masks)
    theta_clean = trace_clean.theta.data
    theta_drop = trace_drop.theta.data
    dropped = forced_masks == 0.0
    per_channel = {
        "mean_theta_clean": theta_clean.mean(axis=0),
        "mean_theta_masked": theta_drop.mean(axis=0),
        "times_dropped": dropped.sum(axis=0),
    }
    return {
        "per_channel": per_channel,
        "mean_theta_on_dropped": float(theta_drop[dropped].mean()) if dropped.any() else float("nan"),
        "mean_theta_on_intact": float(theta_drop[~dropped].mean()),
    }
