from . import kernels
from .adam import Adam, AdamState
from .gradcheck import grad_check, tape_gradients
from .rng import derive_seed, stream
from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    add,
    backward,
    concat,
    conv2d,
    get_dtype,
    linear,
    mean,
    mul,
    precision,
    reshape,
    scale,
    set_precision,
    silu,
    slice_channels,
    sse,
    upsample2x,
)

__all__ = [
    "Adam",
    "AdamState",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "concat",
    "conv2d",
    "derive_seed",
    "get_dtype",
    "grad_check",
    "kernels",
    "linear",
    "mean",
    "mul",
    "precision",
    "reshape",
    "scale",
    "set_precision",
    "silu",
    "slice_channels",
    "sse",
    "stream",
    "tape_gradients",
    "upsample2x",
]
