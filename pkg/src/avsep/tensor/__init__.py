from .engine import (
    CHECK_FINITE,
    Tensor,
    add,
    backward,
    batch_norm,
    categorical_log_prob,
    concat,
    conv2d,
    gru_cell,
    l1_loss,
    leaky_relu,
    log_softmax,
    matmul,
    mean,
    multiply,
    narrow,
    parameter,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    tensor_sum,
    transposed_conv2d,
)
from .layers import BatchNorm, Conv2d, ConvTranspose2d, Dense, GRUCell, Module
from .optim import AdamState, adam_step, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
