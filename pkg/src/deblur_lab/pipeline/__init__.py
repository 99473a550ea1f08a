"""Data ingestion, training, checkpoints and evaluation."""

from .checkpoint import Checkpoint
from .data import (ImageDecodeError, Pair, PairedDataset, ingest, load_image, save_png,
                   severity_stats, split)
from .evaluation import REFERENCE, EvalReport, deblur_single, evaluate
from .training import TrainConfig, TrainResult, load_config, read_history, train

__all__ = ["Checkpoint", "EvalReport", "ImageDecodeError", "Pair", "PairedDataset", "REFERENCE",
           "TrainConfig", "TrainResult", "deblur_single", "evaluate", "ingest", "load_config",
           "load_image", "read_history", "save_png", "severity_stats", "split", "train"]
