"""Network definitions."""

from .layers import AdditiveAttention, BiLstm, Decoder, EncoderOutput, Linear, Module
from .tcen import ARCHS, TASKS, LossResult, ModelConfig, SourceTable, TcenModel, token_nll

__all__ = [
    "ARCHS", "TASKS", "AdditiveAttention", "BiLstm", "Decoder", "EncoderOutput", "Linear",
    "LossResult", "Module", "ModelConfig", "SourceTable", "TcenModel", "token_nll",
]
