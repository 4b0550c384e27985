from .model import (
    ConfigError,
    ForwardTrace,
    NetworkConfig,
    NetworkParams,
    TraceMismatchError,
    analytic_param_count,
    backward,
    batch_loss,
    coord_encode,
    cross_entropy,
    cross_entropy_loss,
    forward,
    fuse_forward,
    geometric_encode,
    init_params,
    param_shapes,
    photometric_encode,
    predict_proba,
)
from .layers import layer_norm, log_softmax, softmax

__all__ = [
    "ConfigError",
    "ForwardTrace",
    "NetworkConfig",
    "NetworkParams",
    "TraceMismatchError",
    "analytic_param_count",
    "backward",
    "batch_loss",
    "coord_encode",
    "cross_entropy",
    "cross_entropy_loss",
    "forward",
    "fuse_forward",
    "geometric_encode",
    "init_params",
    "layer_norm",
    "log_softmax",
    "param_shapes",
    "photometric_encode",
    "predict_proba",
    "softmax",
]
