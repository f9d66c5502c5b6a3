"""Datasets, training loops and end-to-end runs."""

from .data import (
    AugmentFlags,
    Dataset,
    augment,
    decode_cifar10,
    encode_cifar10,
    load_cifar10_binary,
    make_synth_dataset,
    nearest_template,
)
from .runner import load_config, run_all
from .train import (
    TrainConfig,
    accuracy,
    attention_schedule,
    collect_stats,
    evaluate,
    finetune,
    predict,
    train_attention,
    train_base,
)

__all__ = [
    "AugmentFlags",
    "Dataset",
    "TrainConfig",
    "accuracy",
    "attention_schedule",
    "augment",
    "collect_stats",
    "decode_cifar10",
    "encode_cifar10",
    "evaluate",
    "finetune",
    "load_cifar10_binary",
    "load_config",
    "make_synth_dataset",
    "nearest_template",
    "predict",
    "run_all",
    "train_attention",
    "train_base",
]
