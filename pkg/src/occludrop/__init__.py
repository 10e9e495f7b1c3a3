"""Occlusion-robust embedding training via channel-wise feature dropout."""

from .backbone import Insertion, MarginHead, StagedBackbone, margin_loss, place_lcd
from .config import ExperimentConfig
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateChannelError,
    DimensionError,
    InsufficientBatchError,
    NumericError,
    OccludropError,
)
from .gradcheck import finite_difference_check, run_primitive_gradient_suite
from .lcd import (
    DropMask,
    GammaPolicy,
    apply_lcd,
    masked_batchnorm,
    masked_batchnorm_mean,
    masked_batchnorm_stats,
    sample_mask,
)
from .metrics import (
    EvalPairSet,
    OccludedTestSpec,
    build_occluded_split,
    build_pairs,
    rank1_identification,
    tar_at_far,
)
from .sam import SamParams, sam_attention_report, sam_forward
from .spatial_reg import (
    FilterBank,
    ResponseSet,
    channel_response_heatmap,
    filter_orthogonal_loss,
    response_orthogonal_loss,
)
from .strategies import Cutout, DropBlock, ImageTemplate, WeightedChannelDropout
from .tensor import (
    BatchStats,
    Tensor,
    batchnorm,
    conv2d,
    default_dtype,
    flatten,
    global_avg_pool,
    linear,
    relu,
    set_default_dtype,
)
from .train import (
    MomentumSGD,
    RunRecord,
    ablation_suite,
    build_model,
    mse_compensation_experiment,
    place_sweep,
    train,
)

__version__ = "0.1.0"
