"""Learned time-allocation models and the differentiation core they train on."""

from .model import (
    AllocationModel,
    AttentionRecord,
    ModelConfig,
    decode_autoregressive,
    decode_batch,
    dump_attention,
    embed_inputs,
    forward_teacher_forced,
    loss,
    normalize_output,
    param_count,
    positional_encoding,
)
from .train import TrainConfig, TrainResult, evaluate_loss, train, write_history_csv

__all__ = [
    "AllocationModel",
    "AttentionRecord",
    "ModelConfig",
    "decode_autoregressive",
    "decode_batch",
    "dump_attention",
    "embed_inputs",
    "forward_teacher_forced",
    "loss",
    "normalize_output",
    "param_count",
    "positional_encoding",
    "TrainConfig",
    "TrainResult",
    "evaluate_loss",
    "train",
    "write_history_csv",
]
