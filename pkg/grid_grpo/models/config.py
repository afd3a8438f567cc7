"""Training configuration and its JSON/preset loading."""

import json
from pathlib import Path
from typing import Any, Dict, Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from grid_grpo.constants import PRESETS, TASKS
from grid_grpo.models.prompts import GridShape


class TrainConfig(BaseModel):
    seed: int = Field(0, ge=0, description="Root seed; every random stream derives from it.")

    grid_h: int = Field(8, gt=0, description="Grid rows.")
    grid_w: int = Field(8, gt=0, description="Grid columns.")
    vocab_size: int = Field(64, gt=0, description="Codebook size V.")
    embed_dim: int = Field(16, gt=0, description="Codebook embedding dimension C.")
    num_categories: int = Field(8, gt=0, description="Semantic categories K.")
    intra_noise: float = Field(0.1, ge=0.0, le=0.5, description="Token spread around its category center.")

    hidden_size: int = Field(64, gt=0, description="Recurrent state size D.")

    group_size: int = Field(8, ge=2, description="Rollouts per prompt G.")
    batch_size: int = Field(8, gt=0, description="Prompts per step.")
    learning_rate: float = Field(5e-6, gt=0.0, description="Adam learning rate for RL.")
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    kl_beta: float = Field(0.03, ge=0.0, description="KL coefficient beta.")
    entropy_lambda: float = Field(0.4, ge=0.0, description="Entropy reward weight lambda.")
    clip_eps: float = Field(0.2, gt=0.0, lt=1.0, description="Surrogate clip range epsilon.")
    temperature: float = Field(1.0, gt=0.0, description="Sampling temperature.")
    cfg_scale: float = Field(1.0, ge=1.0, description="Sampling-time guidance scale (1 disables it).")
    total_steps: int = Field(500, ge=0, description="RL update steps.")
    inner_epochs: int = Field(1, ge=1, description="Updates per rollout batch.")
    grad_accumulation: int = Field(1, ge=1, description="Rollout batches averaged per Adam step.")
    max_grad_norm: float | None = Field(None, gt=0.0, description="Global gradient-norm clip (off when unset).")

    reweight_advantage: bool = Field(True, description="Similarity-aware advantage masking.")
    reweight_kl: bool = Field(True, description="Similarity-aware per-token KL weights.")
    entropy_reward_mode: Literal["top", "all", "off"] = Field("top", description="Who receives the entropy bonus.")
    entropy_loss_ablation: bool = Field(False, description="Add lambda * mean(dH^2) to the loss.")
    drop_kl_on_zero_std: bool = Field(False, description="Zero the KL term of zero-variance groups.")
    counting_clamp: bool = Field(True, description="Clamp the counting reward to [0, 1].")
    beta_clip_bounds: Tuple[float, float] = Field((0.0, 2.0), description="Clip range for Sim + 1 in beta'.")

    task_weights: Dict[str, float] = Field(
        default_factory=lambda: {task: 1.0 for task in TASKS},
        description="Prompt sampling weight per task.",
    )
    max_count: int = Field(10, gt=0, description="Largest counting target sampled.")

    pretrain_steps: int = Field(2000, ge=0)
    pretrain_batch_size: int = Field(32, gt=0)
    pretrain_learning_rate: float = Field(3e-3, gt=0.0)
    label_noise: float = Field(0.1, ge=0.0, le=1.0, description="Uniform token noise in pretraining grids.")

    eval_every: int = Field(50, ge=0, description="Steps between held-out evaluations (0 disables).")
    eval_prompts_per_task: int = Field(64, gt=0)
    eval_samples: int = Field(1, ge=1)
    eval_seed: int = Field(1234, ge=0)
    render_every: int = Field(50, ge=0, description="Steps between sample renders (0 disables).")
    log_wall_clock: bool = Field(False, description="Write per-step wall-clock seconds to the metrics CSV.")

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def validate_cross_fields(self) -> "TrainConfig":
        if self.vocab_size % self.num_categories != 0:
            raise ValueError(
                f"num_categories={self.num_categories} must divide vocab_size={self.vocab_size}"
            )
        if self.embed_dim < self.num_categories:
            raise ValueError(
                f"embed_dim={self.embed_dim} must be at least num_categories={self.num_categories}"
            )
        low, high = self.beta_clip_bounds
        if not low < high:
            raise ValueError(f"beta_clip_bounds must satisfy low < high, got {self.beta_clip_bounds}")
        unknown = set(self.task_weights) - set(TASKS)
        if unknown:
            raise ValueError(f"Unknown tasks in task_weights: {sorted(unknown)}")
        if any(w < 0 for w in self.task_weights.values()):
            raise ValueError(f"task_weights must be non-negative, got {self.task_weights}")
        if sum(self.task_weights.values()) <= 0:
            raise ValueError("task_weights must give at least one task a positive weight")
        if self.max_count > self.grid_h * self.grid_w:
            raise ValueError(f"max_count={self.max_count} exceeds grid cells {self.grid_h * self.grid_w}")
        return self

    @property
    def shape(self) -> GridShape:
        return GridShape(h=self.grid_h, w=self.grid_w)

    @property
    def active_tasks(self) -> list[str]:
        return [task for task in TASKS if self.task_weights.get(task, 0.0) > 0]


def resolve_config(
    preset: str | None = None,
    config_path: Path | None = None,
    overrides: Dict[str, Any] | None = None,
) -> TrainConfig:
    """Layer preset, then JSON file, then explicit overrides (``None`` values ignored)."""
    values: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"Unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if config_path is not None:
        values.update(json.loads(Path(config_path).read_text()))
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return TrainConfig.model_validate(values)


def save_config(cfg: TrainConfig, path: Path) -> Path:
    path = Path(path)
    path.write_text(cfg.model_dump_json(indent=2) + "\n")
    return path
