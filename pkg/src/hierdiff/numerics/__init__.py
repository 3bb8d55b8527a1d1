"""Float64 tensor substrate with reverse-mode differentiation."""
from .autodiff import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    getitem,
    linear,
    make_op,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sg,
    sigmoid,
    silu,
    square,
    stack,
    stop_gradient,
    sub,
    tanh,
    transpose,
    tsum,
)
from .container import CKPT_MAGIC, load_checkpoint, read_container, save_checkpoint, write_container
from .gradcheck import SurrogateTape, active_tape, grad_check, use_tape
from .optim import AdamW, cosine_lr
from .spatial import conv2d, interpolate, resize_matrix

__all__ = [name for name in dir() if not name.startswith("_")]
