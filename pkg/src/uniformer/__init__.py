"""Desk-scale UniFormer video network.

From-scratch implementation of the hierarchical local/global relation
aggregation architecture: a numpy-backed reverse-mode autodiff engine,
differentiable 3D building blocks, the four-stage model with variant
presets, analytic parameter/FLOP accounting, and the frame-sampling,
multi-view testing, and AdamW training protocols.
"""

from .tensor import Tensor, GradCheckReport, gradcheck
from .nn import (
    BatchNorm3d,
    Conv3d,
    DropPath,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    conv3d,
    drop_path,
    gelu,
    global_avg_pool,
    linear,
    softmax,
    trunc_normal,
)
from .blocks import (
    BlockConfig,
    DynamicPositionEmbedding,
    FeedForward,
    GlobalMHRA,
    LocalMHRA,
    TokenIndex,
    UniformerBlock,
    flat_to_grid,
    grid_to_flat,
    neighborhood,
)
from .model import (
    ModelConfig,
    UniformerModel,
    build_model,
    drop_path_rates,
    inflate_2d,
    load_config,
    load_params,
    preset_config,
    save_config,
    save_params,
)
from .analysis import CostReport, LayerCost, count_flops, count_params, shape_trace, stage_output_shapes
from .pipeline import (
    AdamW,
    SamplingPlan,
    SyntheticDataset,
    TrainConfig,
    TrainLog,
    View,
    adamw_init,
    adamw_step,
    cross_entropy,
    dense_sample,
    evaluate_accuracy,
    lr_at,
    make_synthetic_dataset,
    multi_view_average,
    predict_video,
    resize_shorter,
    square_crops,
    train_toy,
    uniform_sample,
)
from . import tensorfile

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
