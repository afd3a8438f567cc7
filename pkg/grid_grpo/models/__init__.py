"""Pydantic models for configuration, prompts and run records."""

from grid_grpo.models.config import TrainConfig, resolve_config, save_config
from grid_grpo.models.prompts import GridShape, PromptRecord, PromptSpec, PromptTargets
from grid_grpo.models.records import EvalReport, MetricsRecord, TaskScore, UpdateStats

__all__ = [
    "EvalReport",
    "GridShape",
    "MetricsRecord",
    "PromptRecord",
    "PromptSpec",
    "PromptTargets",
    "TaskScore",
    "TrainConfig",
    "UpdateStats",
    "resolve_config",
    "save_config",
]
