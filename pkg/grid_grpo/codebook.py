"""Synthetic VQ codebook: tokens of one category share a direction in embedding space."""

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from loguru import logger
from PIL import Image, ImageColor

from grid_grpo.contract import validate_token_ids
from grid_grpo.models.prompts import GridShape
from grid_grpo.numerics import Rng

__all__ = ["Codebook", "GridShape", "build_codebook", "category_cosine_means", "embed", "render_grid"]


@dataclass(frozen=True)
class Codebook:
    embeddings: np.ndarray
    category_of: np.ndarray
    num_categories: int

    @property
    def vocab_size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def tokens_in(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.category_of == category)


def build_codebook(V: int, C: int, K: int, intra_noise: float, seed: int) -> Codebook:
    """Build ``V`` unit embeddings in ``K`` categories around orthonormal centers.

    ``intra_noise`` is the expected radius of the per-token perturbation around
    its category center (a gaussian scaled by ``intra_noise / sqrt(C)``).
    """
    if K <= 0 or V % K != 0:
        raise ValueError(f"Number of categories K={K} must divide vocabulary size V={V}")
    if C < K:
        raise ValueError(f"Embedding dimension C={C} must be at least K={K}")
    if not 0.0 <= intra_noise <= 0.5:
        raise ValueError(f"intra_noise must lie in [0, 0.5], got {intra_noise}")

    rng = Rng(seed)
    q, r = np.linalg.qr(rng.normal((C, K)))
    centers = (q * np.sign(np.diag(r))).T

    per_category = V // K
    category_of = np.repeat(np.arange(K), per_category)
    noise = rng.normal((V, C)) * (intra_noise / np.sqrt(C))
    raw = centers[category_of] + noise
    embeddings = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    embeddings.setflags(write=False)
    category_of.setflags(write=False)

    codebook = Codebook(embeddings=embeddings, category_of=category_of, num_categories=K)
    intra, inter = category_cosine_means(codebook)
    if per_category > 1 and K > 1 and not intra > inter:
        raise ValueError(
            f"Codebook geometry check failed: intra-category cosine {intra:.4f} "
            f"does not exceed inter-category cosine {inter:.4f}"
        )
    logger.debug(f"Built codebook V={V} C={C} K={K}: intra cos {intra:.4f}, inter cos {inter:.4f}")
    return codebook


def category_cosine_means(cb: Codebook) -> tuple[float, float]:
    """Mean pairwise cosine within categories and across categories (distinct tokens only)."""
    cos = cb.embeddings @ cb.embeddings.T
    same = cb.category_of[:, None] == cb.category_of[None, :]
    off_diagonal = ~np.eye(cb.vocab_size, dtype=bool)
    intra_mask = same & off_diagonal
    inter_mask = ~same
    intra = float(cos[intra_mask].mean()) if intra_mask.any() else float("nan")
    inter = float(cos[inter_mask].mean()) if inter_mask.any() else float("nan")
    return intra, inter


def embed(cb: Codebook, tokens: Sequence[int] | np.ndarray) -> np.ndarray:
    """Position-wise embedding lookup; the result has shape ``tokens.shape + (C,)``."""
    ids = validate_token_ids(tokens, cb.vocab_size)
    return cb.embeddings[ids]


def category_palette(K: int) -> np.ndarray:
    """Fixed RGB per category: category i takes hue i/K at full saturation and value."""
    colors = [ImageColor.getrgb(f"hsv({360.0 * i / K:.4f},100%,100%)") for i in range(K)]
    return np.asarray(colors, dtype=np.uint8)


def grid_image(cb: Codebook, tokens: Sequence[int] | np.ndarray, shape: GridShape, scale: int = 1) -> Image.Image:
    ids = validate_token_ids(tokens, cb.vocab_size)
    if ids.size != shape.length:
        raise ValueError(f"Token count {ids.size} does not match grid {shape.h}x{shape.w}")
    if scale < 1:
        raise ValueError(f"Render scale must be >= 1, got {scale}")
    pixels = category_palette(cb.num_categories)[cb.category_of[ids.reshape(shape.h, shape.w)]]
    image = Image.fromarray(np.ascontiguousarray(pixels))
    if scale > 1:
        image = image.resize((shape.w * scale, shape.h * scale), Image.Resampling.NEAREST)
    return image


def render_grid(
    cb: Codebook,
    tokens: Sequence[int] | np.ndarray,
    shape: GridShape,
    path: Path,
    scale: int = 1,
) -> Path:
    """Write the grid as a binary PPM (P6), one pixel (or ``scale``x``scale`` block) per cell."""
    image = grid_image(cb, tokens, shape, scale=scale)
    path = Path(path)
    image.save(path, format="PPM")
    return path
