from .gradcheck import grad_check
from .optim import RmsProp, clip_global_norm, global_norm
from .rng import (
    BELIEF_INIT,
    ENV_BASE,
    FILTER_NOISE,
    PARAM_INIT,
    POLICY,
    RESAMPLE,
    RngStream,
)
from .tensor import (
    OP_TABLE,
    BatchNormState,
    Tape,
    Tensor,
    add,
    assert_finite,
    backward,
    batchnorm,
    broadcast_to,
    clamp,
    concat,
    constant,
    detach,
    exp,
    forward_op,
    gather_rows,
    gaussian_sample,
    log,
    logsumexp,
    matmul,
    mean_,
    mul,
    parameter,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softplus,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose2d,
)

__all__ = [
    "BatchNormState",
    "OP_TABLE",
    "RmsProp",
    "RngStream",
    "Tape",
    "Tensor",
    "PARAM_INIT",
    "BELIEF_INIT",
    "FILTER_NOISE",
    "RESAMPLE",
    "POLICY",
    "ENV_BASE",
    "add",
    "assert_finite",
    "backward",
    "batchnorm",
    "broadcast_to",
    "clamp",
    "clip_global_norm",
    "concat",
    "constant",
    "detach",
    "exp",
    "forward_op",
    "gather_rows",
    "gaussian_sample",
    "global_norm",
    "grad_check",
    "log",
    "logsumexp",
    "matmul",
    "mean_",
    "mul",
    "parameter",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice_",
    "softplus",
    "sqrt",
    "square",
    "sub",
    "sum_",
    "tanh",
    "transpose2d",
]
