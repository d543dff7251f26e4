from .functional import (
    avg_pool2,
    conv2d,
    downsample,
    instance_norm,
    leaky_relu,
    linear,
    log_softmax,
    minibatch_stddev,
    one_hot,
    pixel_norm,
    soft_dice_loss,
    softmax,
    softmax_cross_entropy,
    upsample_nearest,
)
from .gradcheck import check_gradients, max_relative_error, numerical_gradient
from .layers import Conv2d, InstanceNorm2d, Linear, Module
from .optim import Adam, OptimizerState, SGDNesterov, adam_step, poly_lr, sgd_nesterov_step
from .serialize import CheckpointFormatError, load_parameters, save_parameters
from .tensor import NonFiniteError, Tensor, backward, concat, grad, no_grad, set_grad_enabled

__all__ = [
    "Adam", "CheckpointFormatError", "Conv2d", "InstanceNorm2d", "Linear", "Module",
    "NonFiniteError", "OptimizerState", "SGDNesterov", "Tensor", "adam_step", "avg_pool2",
    "backward", "check_gradients", "concat", "conv2d", "downsample", "grad", "instance_norm",
    "leaky_relu", "linear", "load_parameters", "log_softmax", "max_relative_error",
    "minibatch_stddev", "no_grad", "numerical_gradient", "one_hot", "pixel_norm", "poly_lr",
    "save_parameters", "set_grad_enabled", "sgd_nesterov_step", "soft_dice_loss", "softmax",
    "softmax_cross_entropy", "upsample_nearest",
]
