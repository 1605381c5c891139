"""Part-aware person re-identification on synthetic data."""

from ._core import (
    ConfigError,
    DimensionError,
    IoError,
    batch_hard_triplet,
    config,
    config_hash,
    embed,
    evaluate,
    generate_dataset,
    load_split,
    rank_from_distances,
    sample_plan,
    sd_loss,
    train,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "IoError",
    "batch_hard_triplet",
    "config",
    "config_hash",
    "embed",
    "evaluate",
    "generate_dataset",
    "load_split",
    "rank_from_distances",
    "sample_plan",
    "sd_loss",
    "train",
]
