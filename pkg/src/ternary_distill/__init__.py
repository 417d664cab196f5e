"""Ternary-weight students distilled from full-precision teachers, at toy scale."""

from __future__ import annotations

from .losses import DistillConfig
from .model import BitModel, ModelConfig
from .pipeline import TrainConfig, run_pipeline, toy_data

__version__ = "0.1.0"

__all__ = ["BitModel", "DistillConfig", "ModelConfig", "TrainConfig", "run_pipeline", "toy_data"]
