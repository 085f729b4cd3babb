"""fp64 tape autodiff, Adam, and checkpoint serialization."""

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .optim import AdamConfig, AdamState, adam_step
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    batchnorm2d,
    concat,
    conv2d,
    detach,
    euclid,
    global_avg_pool,
    log_softmax,
    logistic,
    matmul,
    maxpool2d,
    mul,
    narrow,
    neg,
    pick,
    relu,
    reshape,
    roll_rows,
    set_debug_checks,
    softmax,
    sq_euclid,
    sub,
    tensor,
    tile_rows,
    tmean,
    tsum,
)

__all__ = [
    "Tape",
    "Tensor",
    "tensor",
    "backward",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "logistic",
    "softmax",
    "log_softmax",
    "tsum",
    "tmean",
    "sq_euclid",
    "euclid",
    "concat",
    "narrow",
    "roll_rows",
    "tile_rows",
    "pick",
    "reshape",
    "detach",
    "conv2d",
    "maxpool2d",
    "batchnorm2d",
    "global_avg_pool",
    "AdamConfig",
    "AdamState",
    "adam_step",
    "CheckpointError",
    "load_tensors",
    "save_tensors",
]
