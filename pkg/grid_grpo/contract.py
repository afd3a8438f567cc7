from typing import Sequence

import numpy as np

from grid_grpo.models.prompts import GridShape, PromptSpec


def validate_token_ids(tokens: Sequence[int] | np.ndarray, vocab_size: int) -> np.ndarray:
    """Return token ids as an int64 array, rejecting anything outside [0, V)."""
    ids = np.asarray(tokens)
    if ids.size == 0:
        return ids.astype(np.int64).reshape(ids.shape)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"Token ids must be integers, got dtype {ids.dtype}")
    bad = ids[(ids < 0) | (ids >= vocab_size)]
    if bad.size:
        raise ValueError(f"Token ids out of range [0, {vocab_size}): {sorted(set(bad.tolist()))[:8]}")
    return ids.astype(np.int64)


def validate_temperatures(temperatures: Sequence[float]) -> list[float]:
    """Ensure sweep temperatures are positive and sorted ascending."""
    values = [float(t) for t in temperatures]
    if not values:
        raise ValueError("Temperature sweep needs at least one temperature")
    if any(t <= 0 for t in values):
        raise ValueError(f"Temperatures must be positive, got {values}")
    if values != sorted(values):
        raise ValueError(f"Temperatures must be sorted ascending, got {values}")
    return values


def validate_same_length(**arrays: Sequence[float] | np.ndarray) -> int:
    """Ensure all named arrays share one leading length and return it."""
    lengths = {name: len(values) for name, values in arrays.items()}
    if len(set(lengths.values())) > 1:
        details = ", ".join(f"{name}={length}" for name, length in lengths.items())
        raise ValueError(f"Input lengths must match: {details}")
    return next(iter(lengths.values()), 0)


def validate_step_grids(step_grids: dict[str, list[int]]) -> list[int]:
    """Ensure all metrics files share one step grid; return it."""
    if len(step_grids) < 2:
        raise ValueError(f"Comparison needs at least two runs, got {len(step_grids)}")
    reference_name, reference = next(iter(step_grids.items()))
    mismatched = [name for name, steps in step_grids.items() if steps != reference]
    if mismatched:
        raise ValueError(
            f"Metrics step grids differ from {reference_name}: {', '.join(mismatched)}"
        )
    return reference


def validate_prompt(prompt: PromptSpec, shape: GridShape, num_categories: int) -> PromptSpec:
    """Check a prompt's targets against the grid and the category alphabet."""
    bad = [c for c in prompt.categories if c >= num_categories]
    if bad:
        raise ValueError(f"Prompt categories {bad} outside [0, {num_categories})")
    if prompt.task == "counting" and prompt.target_count is not None and prompt.target_count > shape.length:
        raise ValueError(f"target_count={prompt.target_count} exceeds grid cells {shape.length}")
    if prompt.task == "region" and prompt.region is not None:
        outside = [cell for cell in prompt.region if not 0 <= cell < shape.length]
        if outside:
            raise ValueError(f"Region cells {outside} outside grid of {shape.length} cells")
    if prompt.task == "text" and len(prompt.categories) > shape.w:
        raise ValueError(f"Text length {len(prompt.categories)} exceeds grid width {shape.w}")
    return prompt
