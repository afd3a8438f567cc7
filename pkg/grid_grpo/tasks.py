"""Procedural prompts and prompt-satisfying grids for the four grid tasks."""

from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from loguru import logger

from grid_grpo.codebook import Codebook
from grid_grpo.constants import RELATIONS, STREAM_HELDOUT, TASKS
from grid_grpo.contract import validate_prompt
from grid_grpo.models.prompts import GridShape, PromptRecord, PromptSpec
from grid_grpo.numerics import Rng


def sample_task(weights: Mapping[str, float], rng: Rng) -> str:
    probs = np.array([max(float(weights.get(task, 0.0)), 0.0) for task in TASKS])
    if probs.sum() <= 0:
        raise ValueError(f"No task has a positive sampling weight: {dict(weights)}")
    return TASKS[int(rng.choice(len(TASKS), size=1, p=probs / probs.sum())[0])]


def sample_prompt(task: str, shape: GridShape, num_categories: int, rng: Rng, max_count: int = 10) -> PromptSpec:
    if task == "counting":
        category = int(rng.integers(0, num_categories))
        count = int(rng.integers(1, min(max_count, shape.length) + 1))
        return PromptSpec(task="counting", categories=[category], target_count=count)
    if task == "position":
        if num_categories < 2:
            raise ValueError("position prompts need at least two categories")
        first, second = (int(c) for c in rng.permutation(num_categories)[:2])
        relation = RELATIONS[int(rng.integers(0, len(RELATIONS)))]
        return PromptSpec(task="position", categories=[first, second], relation=relation)
    if task == "region":
        category = int(rng.integers(0, num_categories))
        top, bottom = sorted(int(v) for v in rng.integers(0, shape.h, size=2))
        left, right = sorted(int(v) for v in rng.integers(0, shape.w, size=2))
        cells = [row * shape.w + col for row in range(top, bottom + 1) for col in range(left, right + 1)]
        return PromptSpec(task="region", categories=[category], region=cells)
    if task == "text":
        length = int(rng.integers(1, shape.w + 1))
        letters = [int(c) for c in rng.integers(0, num_categories, size=length)]
        return PromptSpec(task="text", categories=letters)
    raise ValueError(f"Unknown task {task!r}, expected one of {TASKS}")


def sample_prompts(
    weights: Mapping[str, float],
    count: int,
    shape: GridShape,
    num_categories: int,
    rng: Rng,
    max_count: int = 10,
) -> list[PromptSpec]:
    return [
        sample_prompt(sample_task(weights, rng), shape, num_categories, rng, max_count=max_count)
        for _ in range(count)
    ]


def draw_from_prompt_set(records: Sequence[PromptRecord], count: int, rng: Rng) -> list[PromptSpec]:
    """Weighted draw with replacement from a loaded prompt set."""
    if not records:
        raise ValueError("Prompt set is empty")
    weights = np.array([record.weight for record in records], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("Prompt set weights sum to zero")
    picks = rng.choice(len(records), size=count, p=weights / weights.sum())
    return [records[int(i)].to_spec() for i in picks]


def heldout_prompts(
    task: str,
    count: int,
    eval_seed: int,
    shape: GridShape,
    num_categories: int,
    max_count: int = 10,
) -> list[PromptSpec]:
    """Frozen evaluation prompts for one task; identical for a given ``eval_seed``."""
    rng = Rng(eval_seed, (STREAM_HELDOUT, TASKS.index(task)))
    return [sample_prompt(task, shape, num_categories, rng, max_count=max_count) for _ in range(count)]


def _background(prompt: PromptSpec, num_categories: int, rng: Rng) -> int:
    free = [c for c in range(num_categories) if c not in set(prompt.categories)]
    if not free:
        return int(rng.integers(0, num_categories))
    return free[int(rng.integers(0, len(free)))]


def _split_cells(shape: GridShape, relation: str) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.divmod(np.arange(shape.length), shape.w)
    if relation == "left_of":
        if shape.w < 2:
            raise ValueError("left_of prompts need a grid at least two columns wide")
        first = cols < shape.w // 2
    else:
        if shape.h < 2:
            raise ValueError("above prompts need a grid at least two rows high")
        first = rows < shape.h // 2
    return np.flatnonzero(first), np.flatnonzero(~first)


def synthesize_categories(prompt: PromptSpec, shape: GridShape, num_categories: int, rng: Rng) -> np.ndarray:
    """Category layout (length ``h*w``) that satisfies ``prompt`` exactly."""
    validate_prompt(prompt, shape, num_categories)
    grid = np.full(shape.length, _background(prompt, num_categories, rng), dtype=np.int64)
    if prompt.task == "counting":
        cells = rng.permutation(shape.length)[: prompt.target_count]
        grid[cells] = prompt.categories[0]
    elif prompt.task == "position":
        near, far = _split_cells(shape, prompt.relation or "left_of")
        for category, pool in zip(prompt.categories, (near, far)):
            size = int(rng.integers(1, min(4, pool.size) + 1))
            grid[rng.permutation(pool)[:size]] = category
    elif prompt.task == "region":
        grid[np.asarray(prompt.region, dtype=np.int64)] = prompt.categories[0]
    elif prompt.task == "text":
        grid[: len(prompt.categories)] = prompt.categories
    return grid


def synthesize_grid(prompt: PromptSpec, cb: Codebook, shape: GridShape, rng: Rng, label_noise: float = 0.0) -> np.ndarray:
    """Token grid whose categories satisfy ``prompt``, with a share of cells replaced by uniform tokens."""
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError(f"label_noise must lie in [0, 1], got {label_noise}")
    categories = synthesize_categories(prompt, shape, cb.num_categories, rng)
    per_category = cb.vocab_size // cb.num_categories
    tokens = categories * per_category + rng.integers(0, per_category, size=shape.length)
    noisy = rng.uniform(shape.length) < label_noise
    tokens[noisy] = rng.integers(0, cb.vocab_size, size=int(noisy.sum()))
    return tokens.astype(np.int64)


def write_prompt_set(records: Iterable[PromptRecord | PromptSpec], path: Path) -> Path:
    path = Path(path)
    lines = [
        (record if isinstance(record, PromptRecord) else PromptRecord.from_spec(record)).model_dump_json()
        for record in records
    ]
    path.write_text("".join(line + "\n" for line in lines))
    logger.info(f"Wrote {len(lines)} prompts to {path}")
    return path


def load_prompt_set(path: Path) -> list[PromptRecord]:
    path = Path(path)
    records = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(PromptRecord.model_validate_json(line))
        except ValueError as err:
            raise ValueError(f"{path}:{number}: invalid prompt record: {err}") from err
    logger.info(f"Loaded {len(records)} prompts from {path}")
    return records
