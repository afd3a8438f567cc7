"""Records emitted by training and evaluation."""

from typing import Dict

from pydantic import BaseModel, ConfigDict, Field


class UpdateStats(BaseModel):
    """Statistics of one policy update; the objective fills the surrogate side, the trainer the rest."""

    surrogate: float
    mean_kl: float
    mean_entropy: float = 0.0
    clip_fraction: float = Field(ge=0.0, le=1.0)
    grad_norm: float = Field(0.0, ge=0.0)
    skipped_groups: int = Field(0, ge=0)
    ratio_clamped: bool = False
    log_floor_hits: int = Field(0, ge=0)

    model_config = ConfigDict(extra="forbid")


class MetricsRecord(BaseModel):
    """One row of ``metrics.csv``; per-task rewards are absent when no prompt of that task was drawn."""

    step: int = Field(ge=0)
    mean_reward: float
    max_reward: float
    mean_advantage: float
    mean_entropy: float
    mean_ref_entropy: float
    mean_kl: float
    clip_fraction: float = Field(ge=0.0, le=1.0)
    grad_norm: float
    surrogate: float
    skipped_groups: int
    ratio_clamped: int
    log_floor_hits: int
    reward_counting: float | None = None
    reward_position: float | None = None
    reward_region: float | None = None
    reward_text: float | None = None
    wall_clock: float | None = None

    model_config = ConfigDict(extra="forbid")


class TaskScore(BaseModel):
    mean_reward: float
    std_reward: float
    mean_entropy: float
    samples: int = Field(ge=0)

    model_config = ConfigDict(extra="forbid")


class EvalReport(BaseModel):
    temperature: float
    n_samples: int
    per_task: Dict[str, TaskScore]
    overall: TaskScore

    model_config = ConfigDict(extra="forbid")
