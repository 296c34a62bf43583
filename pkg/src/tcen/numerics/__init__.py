"""Dense float64 tensors with define-by-run reverse-mode differentiation."""

from .attention import additive_attention, attention_lstm
from .gradcheck import grad_check
from .primitives import (
    NEG,
    PRIMITIVES,
    add,
    apply,
    concat,
    dropout,
    embedding,
    exp,
    gather,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
    tsum,
)
from .recurrent import bilstm, lstm, lstm_cell
from .tensor import Parameter, Tape, Tensor, as_tensor, backward, no_tape, zero_grads

__all__ = [
    "NEG", "PRIMITIVES", "Parameter", "Tape", "Tensor", "add", "additive_attention", "attention_lstm", "apply", "as_tensor",
    "backward", "bilstm", "concat", "dropout", "embedding", "exp", "gather", "grad_check",
    "log_softmax", "logsumexp", "lstm", "lstm_cell", "matmul", "mean", "mul", "no_tape",
    "relu", "reshape", "sigmoid", "softmax", "stack", "tanh", "transpose", "tsum", "zero_grads",
]
