"""Minimal tensor engine: reverse-mode autodiff, layer kernels, Adam, checkpoints."""
from .checkpoint import CheckpointError, describe_checkpoint, load_checkpoint, save_checkpoint
from .functional import (
    bce_with_logits, bilstm, conv1d, conv_output_length, cross_entropy, dropout, layer_norm,
    log_softmax, lstm_step, softmax,
)
from .layers import (
    FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock, derive_rng,
    sinusoidal_positions,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError, Tensor, add, concat, exp, gelu, get_dtype, log, matmul, mean, mul, no_grad,
    pad_time, precision, relu, reshape, sigmoid, stack, tanh, transpose, tsum,
)
