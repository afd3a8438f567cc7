"""Pydantic models describing grids, prompts and prompt-set records."""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

Task = Literal["counting", "position", "region", "text"]
Relation = Literal["left_of", "above"]


class GridShape(BaseModel):
    h: int = Field(gt=0)
    w: int = Field(gt=0)

    model_config = ConfigDict(extra="forbid", frozen=True)

    @property
    def length(self) -> int:
        return self.h * self.w


class PromptSpec(BaseModel):
    """Structured prompt: which task, which categories, and the target to satisfy.

    ``categories`` holds the category under test (counting, region), the
    ordered pair A, B (position) or the target string (text).
    """

    task: Task
    categories: list[int]
    target_count: int | None = None
    relation: Relation | None = None
    region: list[int] | None = None

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def validate_task_fields(self) -> "PromptSpec":
        if any(c < 0 for c in self.categories):
            raise ValueError(f"categories must be non-negative, got {self.categories}")
        if self.task == "counting":
            if len(self.categories) != 1 or self.target_count is None or self.target_count < 0:
                raise ValueError("counting prompts need one category and a non-negative target_count")
        elif self.task == "position":
            if len(self.categories) != 2 or self.relation is None:
                raise ValueError("position prompts need a category pair and a relation")
        elif self.task == "region":
            if len(self.categories) != 1 or self.region is None:
                raise ValueError("region prompts need one category and a region cell list")
        return self


class PromptTargets(BaseModel):
    count: int | None = None
    relation: Relation | None = None
    region: list[int] | None = None

    model_config = ConfigDict(extra="forbid")


class PromptRecord(BaseModel):
    """One line of a prompt-set file: ``{task, categories, targets, weight}``."""

    task: Task
    categories: list[int]
    targets: PromptTargets = Field(default_factory=PromptTargets)
    weight: float = Field(1.0, ge=0.0)

    model_config = ConfigDict(extra="forbid")

    def to_spec(self) -> PromptSpec:
        return PromptSpec(
            task=self.task,
            categories=self.categories,
            target_count=self.targets.count,
            relation=self.targets.relation,
            region=self.targets.region,
        )

    @classmethod
    def from_spec(cls, spec: PromptSpec, weight: float = 1.0) -> "PromptRecord":
        return cls(
            task=spec.task,
            categories=list(spec.categories),
            targets=PromptTargets(count=spec.target_count, relation=spec.relation, region=spec.region),
            weight=weight,
        )
