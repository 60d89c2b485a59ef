"""Tensor arithmetic, reverse-mode autodiff, RNG streams and checkpoints."""

from .core import (
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    add,
    clamp,
    concat,
    cosine_similarity,
    cross_entropy,
    div,
    exp,
    gelu,
    get_dtype,
    getitem,
    grad_enabled,
    l2_normalize,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    ones,
    power,
    precision,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tanh,
    tensor,
    transpose,
    tsum,
    where,
    zeros,
)
from .rng import RngStream, stream_id
from .nn import CheckpointMismatch, Embedding, LayerNorm, Linear, Module, parameter
from . import checkpoint
from .gradcheck import check_gradients
