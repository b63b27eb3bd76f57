from .autodiff import Tensor, concat, relu, sigmoid, tanh
from .gradcheck import grad_check
from .layers import (
    GruLayer,
    LstmLayer,
    Mlp,
    bigru_forward,
    gru_cell,
    gru_sequence,
    lstm_cell,
    lstm_forward,
    lstm_sequence,
    mlp_forward,
    mse,
)
from .optim import Adam, adam_step

__all__ = [
    "Adam", "GruLayer", "LstmLayer", "Mlp", "Tensor", "adam_step", "bigru_forward", "concat",
    "grad_check", "gru_cell", "gru_sequence", "lstm_cell", "lstm_forward", "lstm_sequence",
    "mlp_forward", "mse", "relu", "sigmoid", "tanh",
]
