"""Toy staged CNN backbone with an identification margin head.

Four stages mirror a residual network at small width: each stage halves the
spatial size with a strided conv-BN-ReLU block, then runs one more 3x3
conv-BN whose output is added back to the block input. The channel dropout,
optional attention reweighting, and baseline feature-level strategies hook
into the output of a chosen stage's final conv+BN.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .lcd import DropMask, GammaPolicy, apply_lcd, masked_batchnorm, sample_mask
from .sam import SamParams, sam_forward
from .tensor import (
    BatchStats,
    Tensor,
    add,
    batchnorm,
    conv2d,
    global_avg_pool,
    linear,
    logsumexp,
    mul,
    relu,
    sqrt,
    sub,
    tsum,
)

STAGE_WIDTH_MULTIPLIERS = (1, 2, 4, 8)
LCD_ORDERS = ("bn_then_lcd", "lcd_then_maskedbn")
REG_TAPS = ("after_norm", "after_conv")
FORCED_DROP_STAGE = 3  # where the compensation experiment injects drops


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def orthogonal_column_init(
    rng: np.random.Generator, c_out: int, c_in: int, k: int, column_mode: str = "kernel_cols"
) -> np.ndarray:
    """Conv weights whose per-offset column sets start mutually orthogonal.

    For each kernel offset p the c_out columns (dimension c_in*k) are an
    orthonormal frame scaled to the fan-in-uniform magnitude, so the filter
    decorrelation penalty starts at its minimum instead of fighting a large
    transient. Requires c_out <= c_in*k.
    """
    dim = c_in * k
    if c_out > dim:
        raise ContractError(
            f"orthogonal column init needs c_out <= c_in*k, got {c_out} > {dim}"
        )
    scale = 1.0 / np.sqrt(3.0 * k)  # matches E||column|| under fan-in uniform init
    view = np.empty((c_out, dim, k))
    for p in range(k):
        q, _ = np.linalg.qr(rng.standard_normal((dim, c_out)))
        view[:, :, p] = q.T * scale
    w = view.reshape(c_out, c_in, k, k)
    if column_mode == "kernel_rows":
        w = w.transpose(0, 1, 3, 2)
    return w


class Conv2dLayer:
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1):
        self.weight = fan_in_uniform(rng, (c_out, c_in, k, k), fan_in=c_in * k * k)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class NormLayer:
    def __init__(self, c: int, epsilon: float = 1e-5, momentum: float = 0.9):
        self.scale = Tensor(np.ones(c), requires_grad=True)
        self.shift = Tensor(np.zeros(c), requires_grad=True)
        self.stats = BatchStats.for_channels(c, momentum=momentum, epsilon=epsilon)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm(x, self.scale, self.shift, self.stats, training)


class DenseLayer:
    def __init__(self, rng, d_in: int, d_out: int):
        self.w = fan_in_uniform(rng, (d_out, d_in), fan_in=d_in)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class Stage:
    def __init__(self, rng, c_in: int, c_out: int, epsilon: float, momentum: float):
        self.conv1 = Conv2dLayer(rng, c_in, c_out, stride=2)
        self.bn1 = NormLayer(c_out, epsilon, momentum)
        self.conv2 = Conv2dLayer(rng, c_out, c_out, stride=1)
        self.bn2 = NormLayer(c_out, epsilon, momentum)


@dataclass
class Insertion:
    """What gets wired into a stage: dropout, attention, or a baseline strategy."""

    stage: int = 3
    lcd: GammaPolicy | None = None
    order: str = "bn_then_lcd"
    sam: SamParams | None = None
    feature_strategy: object | None = None

    def __post_init__(self):
        if self.order not in LCD_ORDERS:
            raise ConfigError(f"unknown lcd order {self.order!r}, expected one of {LCD_ORDERS}")


@dataclass
class ForwardTrace:
    """Intermediate values the harness needs: the regularized layer's
    responses, the sampled drop mask, and the attention weights."""

    responses: Tensor | None = None
    drop_mask: DropMask | None = None
    theta: Tensor | None = None


class StagedBackbone:
    """Four-stage CNN producing a fixed-length embedding per image."""

    def __init__(
        self,
        rng: np.random.Generator,
        image_size: int = 64,
        in_channels: int = 1,
        width_base: int = 16,
        embedding_dim: int = 128,
        bn_epsilon: float = 1e-5,
        bn_momentum: float = 0.9,
    ):
        if image_size % 16 != 0:
            raise DimensionError(f"image size {image_size} must be divisible by 16")
        self.image_size = image_size
        self.in_channels = in_channels
        self.widths = [width_base * m for m in STAGE_WIDTH_MULTIPLIERS]
        self.embedding_dim = embedding_dim
        self.stem_conv = Conv2dLayer(rng, in_channels, width_base, stride=1)
        self.stem_bn = NormLayer(width_base, bn_epsilon, bn_momentum)
        self.stages = []
        c_prev = width_base
        for c in self.widths:
            self.stages.append(Stage(rng, c_prev, c, bn_epsilon, bn_momentum))
            c_prev = c
        self.embed = DenseLayer(rng, self.widths[-1], embedding_dim)
        self.insertion: Insertion | None = None
        self.reg_tap = "after_norm"

    def stage_channels(self, stage: int) -> int:
        return self.widths[stage - 1]

    def stage_spatial(self, stage: int) -> int:
        return self.image_size >> stage

    @property
    def reg_stage(self) -> int:
        return self.insertion.stage if self.insertion is not None else FORCED_DROP_STAGE

    def regularized_weights(self) -> Tensor:
        """The conv feeding the insertion point; its filters get regularized."""
        return self.stages[self.reg_stage - 1].conv2.weight

    def forward(self, images, training: bool, rng=None, forced_mask=None):
        """Run the network; returns (embeddings, trace).

        ``forced_mask`` is an (n, c) binary array injecting channel drops at
        the forced-drop stage in an otherwise normal forward (used by the
        compensation experiment; works on models without any insertion).
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4:
            raise DimensionError(f"expected (n,c,h,w) images, got shape {x.data.shape}")
        if x.data.shape[2] % 16 != 0 or x.data.shape[3] % 16 != 0:
            raise DimensionError(
                f"input spatial size {x.data.shape[2]}x{x.data.shape[3]} must be divisible by 16"
            )
        trace = ForwardTrace()
        x = relu(self.stem_bn(self.stem_conv(x), training))
        for idx, stage in enumerate(self.stages, start=1):
            ins = self.insertion if self.insertion is not None and self.insertion.stage == idx else None
            y1 = relu(stage.bn1(stage.conv1(x), training))
            z = stage.conv2(y1)
            if idx == self.reg_stage and self.reg_tap == "after_conv":
                trace.responses = z
            if ins is not None and ins.lcd is not None and ins.order == "lcd_then_maskedbn" and training:
                if rng is None:
                    raise ContractError("training forward with channel dropout needs an rng")
                n, c, h, w = z.data.shape
                mask = sample_mask(n, c, h, w, ins.lcd, rng)
                trace.drop_mask = mask
                if idx == self.reg_stage and trace.responses is None:
                    trace.responses = z  # pre-drop tap; after_norm is unavailable here
                y2 = masked_batchnorm(
                    apply_lcd(z, mask, training=True),
                    stage.bn2.scale,
                    stage.bn2.shift,
                    mask,
                    stage.bn2.stats,
                    training=True,
                )
            else:
                y2 = stage.bn2(z, training)
                if idx == self.reg_stage and trace.responses is None:
                    trace.responses = y2
                if ins is not None and training:
                    if ins.lcd is not None:
                        if rng is None:
                            raise ContractError("training forward with channel dropout needs an rng")
                        n, c, h, w = y2.data.shape
                        mask = sample_mask(n, c, h, w, ins.lcd, rng)
                        trace.drop_mask = mask
                        y2 = apply_lcd(y2, mask, training=True)
                    elif ins.feature_strategy is not None:
                        if rng is None:
                            raise ContractError("training forward with a feature strategy needs an rng")
                        y2 = ins.feature_strategy.apply_features(y2, rng)
            if forced_mask is not None and idx == FORCED_DROP_STAGE:
                fm = np.asarray(forced_mask)
                if fm.shape != (y2.data.shape[0], y2.data.shape[1]):
                    raise DimensionError(
                        f"forced mask shape {fm.shape} does not match feature ({y2.data.shape[0]}, {y2.data.shape[1]})"
                    )
                y2 = mul(y2, Tensor(fm[:, :, None, None]))
            if ins is not None and ins.sam is not None:
                theta, y2 = sam_forward(y2, ins.sam)
                trace.theta = theta
            x = relu(add(y1, y2))
        emb = self.embed(global_avg_pool(x))
        return emb, trace

    # -- parameter bookkeeping -------------------------------------------

    def named_parameters(self) -> dict:
        params = {
            "stem.conv.weight": self.stem_conv.weight,
            "stem.bn.scale": self.stem_bn.scale,
            "stem.bn.shift": self.stem_bn.shift,
        }
        for i, stage in enumerate(self.stages, start=1):
            params[f"stage{i}.conv1.weight"] = stage.conv1.weight
            params[f"stage{i}.bn1.scale"] = stage.bn1.scale
            params[f"stage{i}.bn1.shift"] = stage.bn1.shift
            params[f"stage{i}.conv2.weight"] = stage.conv2.weight
            params[f"stage{i}.bn2.scale"] = stage.bn2.scale
            params[f"stage{i}.bn2.shift"] = stage.bn2.shift
        params["embed.w"] = self.embed.w
        params["embed.b"] = self.embed.b
        if self.insertion is not None and self.insertion.sam is not None:
            for name, t in self.insertion.sam.parameters().items():
                params[f"sam.{name}"] = t
        return params

    def named_buffers(self) -> dict:
        buffers = {}
        norms = [("stem.bn", self.stem_bn)]
        for i, stage in enumerate(self.stages, start=1):
            norms.append((f"stage{i}.bn1", stage.bn1))
            norms.append((f"stage{i}.bn2", stage.bn2))
        for name, layer in norms:
            buffers[f"{name}.running_mean"] = layer.stats.running_mean
            buffers[f"{name}.running_variance"] = layer.stats.running_variance
        return buffers

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, field = name.rsplit(".", 1)
        layers = {"stem.bn": self.stem_bn}
        for i, stage in enumerate(self.stages, start=1):
            layers[f"stage{i}.bn1"] = stage.bn1
            layers[f"stage{i}.bn2"] = stage.bn2
        if prefix not in layers or field not in ("running_mean", "running_variance"):
            raise ContractError(f"unknown buffer {name!r}")
        setattr(layers[prefix].stats, field, value.copy())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def place_lcd(model: StagedBackbone, stage: int, rng=None) -> StagedBackbone:
    """Move (or create) the model's insertion at the given stage.

    Attention parameters are shape-bound to the stage, so moving an
    insertion that carries them requires an rng to rebuild them.
    """
    if stage not in (1, 2, 3, 4):
        raise ConfigError(f"unknown stage {stage}; valid stages are 1..4")
    ins = model.insertion
    if ins is None:
        policy = GammaPolicy.defaults_for_channels(model.stage_channels(stage))
        model.insertion = Insertion(stage=stage, lcd=policy)
        return model
    policy = ins.lcd
    if policy is not None and policy.gamma_max > model.stage_channels(stage):
        policy = GammaPolicy.defaults_for_channels(
            model.stage_channels(stage), rng_seed=policy.rng_seed
        )
    sam = ins.sam
    if sam is not None and ins.stage != stage:
        if rng is None:
            raise ContractError("moving an insertion with attention requires an rng to rebuild it")
        sam = SamParams.create(
            model.stage_channels(stage),
            model.stage_spatial(stage),
            model.stage_spatial(stage),
            rng,
            squash=sam.squash,
        )
    model.insertion = replace(ins, stage=stage, lcd=policy, sam=sam)
    return model


# -- identification head ------------------------------------------------------


@dataclass
class MarginHead:
    """Class weight matrix plus the additive angular margin and logit scale."""

    class_weights: Tensor
    margin: float = 0.5
    scale: float = 64.0
    clamp_count: int = 0

    @classmethod
    def create(cls, rng, num_ids: int, dim: int, margin: float = 0.5, scale: float = 64.0):
        return cls(
            class_weights=Tensor(rng.standard_normal((num_ids, dim)), requires_grad=True),
            margin=margin,
            scale=scale,
        )


def _row_normalize(t: Tensor) -> Tensor:
    norms = sqrt(tsum(mul(t, t), axis=1, keepdims=True))
    return t / (norms + Tensor(np.asarray(1e-12)))

COS_LIMIT = 1.0 - 1e-7


def margin_loss(embeddings: Tensor, labels, head: MarginHead) -> Tensor:
    """Additive angular-margin cross-entropy on cosine logits.

    The true-class logit uses cos(angle + margin); all logits are scaled
    before the softmax. With margin 0 and scale 1 this is plain normalized
    softmax cross-entropy. Cosines outside the open unit interval are
    clamped and counted on the head.
    """
    labels = np.asarray(labels)
    n, dim = embeddings.data.shape
    num_ids, wdim = head.class_weights.data.shape
    if wdim != dim:
        raise DimensionError(
            f"embedding dim {dim} does not match class weight dim {wdim}"
        )
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= num_ids:
        raise ContractError(f"labels must lie in [0, {num_ids}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    e = _row_normalize(embeddings)
    w = _row_normalize(head.class_weights)
    cos_raw = e @ w.T
    head.clamp_count += int(np.sum(np.abs(cos_raw.data) > COS_LIMIT))
    from .tensor import clip

    cos = clip(cos_raw, -COS_LIMIT, COS_LIMIT)
    onehot = np.zeros((n, num_ids))
    onehot[np.arange(n), labels] = 1.0
    onehot_t = Tensor(onehot)
    if head.margin != 0.0:
        sin = sqrt(sub(Tensor(np.asarray(1.0)), mul(cos, cos)))
        shifted = sub(
            mul(cos, Tensor(np.asarray(np.cos(head.margin)))),
            mul(sin, Tensor(np.asarray(np.sin(head.margin)))),
        )
        target = add(mul(onehot_t, shifted), mul(Tensor(1.0 - onehot), cos))
    else:
        target = cos
    logits = mul(target, Tensor(np.asarray(head.scale)))
    logp = sub(logits, logsumexp(logits, axis=1))
    picked = tsum(mul(onehot_t, logp))
    return mul(picked, Tensor(np.asarray(-1.0 / n)))
