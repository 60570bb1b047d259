"""Autodiff tensor engine: 4-D tensors, differentiable primitives, Adam."""

from .tensor import Tensor, backward, topological_order
from .ops import (
    constant, add, sub, mul, scale, shift, sum_all, sqrt, relu, sigmoid,
    concat, conv2d, deform_conv2d, maxpool2d, upsample_bilinear2x,
    global_avg_pool, global_max_pool, channel_mean, channel_max,
    fully_connected, l2_normalize, bilinear_sample, take_batch,
)
from .optim import AdamState, adam_step, LrSchedule, parameter_grads, NonFiniteGradient
from .checkpoint import save_checkpoint, load_checkpoint, FORMAT_VERSION
