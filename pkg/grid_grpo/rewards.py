"""Rule-based grid rewards, the reference-anchored entropy reward and reward combination."""

import math
from typing import Callable, Sequence

import numpy as np

from grid_grpo import numerics as nx
from grid_grpo.codebook import Codebook
from grid_grpo.constants import ENTROPY_REWARD_MODES
from grid_grpo.contract import validate_same_length, validate_token_ids
from grid_grpo.models.prompts import GridShape, PromptSpec
from grid_grpo.numerics import Tensor

RewardFn = Callable[..., float]


def _shape_for(tokens: np.ndarray, shape: GridShape | None) -> GridShape:
    if shape is not None:
        if tokens.size != shape.length:
            raise ValueError(f"Token count {tokens.size} does not match grid {shape.h}x{shape.w}")
        return shape
    side = math.isqrt(tokens.size)
    if side * side != tokens.size or side == 0:
        raise ValueError(f"Cannot infer a square grid from {tokens.size} tokens; pass shape")
    return GridShape(h=side, w=side)


def _categories(tokens: Sequence[int] | np.ndarray, cb: Codebook) -> np.ndarray:
    return cb.category_of[validate_token_ids(np.asarray(tokens).reshape(-1), cb.vocab_size)]


def _expect(p: PromptSpec, task: str) -> None:
    if p.task != task:
        raise ValueError(f"Expected a {task} prompt, got {p.task}")


def counting_reward(
    tokens: Sequence[int] | np.ndarray,
    cb: Codebook,
    p: PromptSpec,
    shape: GridShape | None = None,
    clamp: bool = True,
) -> float:
    _expect(p, "counting")
    n_ref = p.target_count or 0
    if n_ref < 1:
        raise ValueError(f"Counting reward needs target_count >= 1, got {n_ref}")
    n_gen = int(np.sum(_categories(tokens, cb) == p.categories[0]))
    reward = 1.0 - abs(n_gen - n_ref) / n_ref
    return min(max(reward, 0.0), 1.0) if clamp else reward


def position_reward(
    tokens: Sequence[int] | np.ndarray,
    cb: Codebook,
    p: PromptSpec,
    shape: GridShape | None = None,
) -> float:
    """Share of satisfied clauses: A present, B present, and the relation between their centroids."""
    _expect(p, "position")
    first, second = p.categories
    if first == second:
        raise ValueError(f"Position prompts need two distinct categories, got {first} twice")
    categories = _categories(tokens, cb)
    grid = _shape_for(categories, shape)
    rows, cols = np.divmod(np.arange(grid.length), grid.w)
    in_first, in_second = categories == first, categories == second
    satisfied = int(in_first.any()) + int(in_second.any())
    if in_first.any() and in_second.any():
        axis = cols if p.relation == "left_of" else rows
        satisfied += int(axis[in_first].mean() < axis[in_second].mean())
    return satisfied / 3.0


def region_reward(
    tokens: Sequence[int] | np.ndarray,
    cb: Codebook,
    p: PromptSpec,
    shape: GridShape | None = None,
) -> float:
    _expect(p, "region")
    if not p.region:
        raise ValueError("Region reward needs a non-empty region")
    categories = _categories(tokens, cb)
    grid = _shape_for(categories, shape)
    cells = np.asarray(p.region, dtype=np.int64)
    if np.any((cells < 0) | (cells >= grid.length)):
        raise ValueError(f"Region cells outside grid of {grid.length} cells")
    return float(np.mean(categories[cells] == p.categories[0]))


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    dist = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    dist[:, 0] = np.arange(len(a) + 1)
    dist[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            dist[i, j] = min(dist[i - 1, j] + 1, dist[i, j - 1] + 1, dist[i - 1, j - 1] + cost)
    return int(dist[-1, -1])


def text_reward(
    tokens: Sequence[int] | np.ndarray,
    cb: Codebook,
    p: PromptSpec,
    shape: GridShape | None = None,
) -> float:
    """``max(1 - N_e / N_ref, 0)`` on the first row's first ``N_ref`` cells."""
    _expect(p, "text")
    n_ref = len(p.categories)
    if n_ref < 1:
        raise ValueError("Text reward needs a target string of length >= 1")
    categories = _categories(tokens, cb)
    grid = _shape_for(categories, shape)
    if n_ref > grid.w:
        raise ValueError(f"Text length {n_ref} exceeds grid width {grid.w}")
    rendered = categories[:n_ref].tolist()
    return max(1.0 - edit_distance(rendered, p.categories) / n_ref, 0.0)


REWARD_REGISTRY: dict[str, RewardFn] = {
    "counting": counting_reward,
    "position": position_reward,
    "region": region_reward,
    "text": text_reward,
}


def score(
    tokens: Sequence[int] | np.ndarray,
    cb: Codebook,
    p: PromptSpec,
    shape: GridShape | None = None,
    counting_clamp: bool = True,
) -> float:
    """Dispatch to the task's reward through the registry."""
    if p.task == "counting":
        return counting_reward(tokens, cb, p, shape=shape, clamp=counting_clamp)
    return REWARD_REGISTRY[p.task](tokens, cb, p, shape=shape)


def entropy_reward(h_ref: float | np.ndarray, h_theta: float | np.ndarray) -> float | np.ndarray:
    """``1 / (1 + (H_ref - H_theta)^2)``, elementwise for arrays."""
    delta = np.asarray(h_ref, dtype=np.float64) - np.asarray(h_theta, dtype=np.float64)
    value = 1.0 / (1.0 + delta * delta)
    return float(value) if value.ndim == 0 else value


def combine_rewards(
    rewards: Sequence[float] | np.ndarray,
    entropy_rewards: Sequence[float] | np.ndarray,
    lam: float,
    mode: str = "top",
) -> np.ndarray:
    """Add ``lam * R_ent`` to every top-scoring sample (``top``), to all (``all``) or to none (``off``).

    Every sample tied for the maximum receives the bonus.
    """
    if lam < 0:
        raise ValueError(f"Entropy reward weight must be non-negative, got {lam}")
    if mode not in ENTROPY_REWARD_MODES:
        raise ValueError(f"Unknown entropy reward mode {mode!r}; expected one of {ENTROPY_REWARD_MODES}")
    validate_same_length(rewards=rewards, entropy_rewards=entropy_rewards)
    base = np.asarray(rewards, dtype=np.float64)
    bonus = np.asarray(entropy_rewards, dtype=np.float64)
    if base.size == 0:
        raise ValueError("Cannot combine rewards of an empty group")
    if mode == "off":
        return base.copy()
    if mode == "all":
        return base + lam * bonus
    return base + lam * bonus * (base == base.max())


def entropy_loss_ablation(delta_h: Tensor | Sequence[float] | np.ndarray, lam: float) -> Tensor:
    """``lam * mean(dH^2)``, differentiable through whatever produced ``delta_h``."""
    if lam < 0:
        raise ValueError(f"Entropy loss weight must be non-negative, got {lam}")
    delta = delta_h if isinstance(delta_h, Tensor) else Tensor(delta_h)
    return nx.mul(nx.mean(nx.square(delta)), lam)
