from .tensor import Graph, Node, Tensor, backward, default_dtype, precision, set_default_dtype
from .ops import (
    add,
    avgpool2,
    concat_channels,
    conv3d,
    dice_ce_loss,
    leaky_relu,
    mul,
    reduce_sum,
    scale_channel,
    softmax,
    spatial_norm,
    take_scalar,
    upsample_nearest,
)
from .optim import OptimizerState, optimizer_step, zero_grads
from .checkpoint import MAGIC, load_params, save_params

__all__ = [
    "Graph", "Node", "Tensor", "backward", "default_dtype", "precision",
    "set_default_dtype", "add", "avgpool2", "concat_channels", "conv3d", "dice_ce_loss",
    "leaky_relu", "mul", "reduce_sum", "scale_channel", "softmax",
    "spatial_norm", "take_scalar", "upsample_nearest", "OptimizerState",
    "optimizer_step", "zero_grads", "MAGIC", "load_params", "save_params",
]
