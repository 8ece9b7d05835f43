"""Toy sequence-to-sequence acoustic model, losses, training and bundles."""

from .config import ModelConfig
from .losses import LossParts, attentive_stop_loss, total_loss, trace_stop_loss
from .seq2seq import PRUNABLE, DecodeTrace, Seq2Seq, TeacherOutputs
from .train import TrainConfig, TrainResult, read_metrics_csv, train_toy, write_metrics_csv

__all__ = [
    "ModelConfig", "LossParts", "attentive_stop_loss", "total_loss", "trace_stop_loss",
    "PRUNABLE", "DecodeTrace", "Seq2Seq", "TeacherOutputs",
    "TrainConfig", "TrainResult", "read_metrics_csv", "train_toy", "write_metrics_csv",
]
