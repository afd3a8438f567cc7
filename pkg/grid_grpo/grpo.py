"""Group-relative advantages, similarity-aware reweighting and the clipped KL-regularized objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from loguru import logger

from grid_grpo import numerics as nx
from grid_grpo.codebook import Codebook
from grid_grpo.constants import KL_LOG_FLOOR, RATIO_EXPONENT_CLAMP, ZERO_STD_THRESHOLD
from grid_grpo.contract import validate_same_length
from grid_grpo.models.config import TrainConfig
from grid_grpo.models.prompts import PromptSpec
from grid_grpo.models.records import UpdateStats
from grid_grpo.numerics import Tensor
from grid_grpo.policy import PolicyParams, Rollout, gather_tokens, policy_log_probs, rollout_batch
from grid_grpo.rewards import combine_rewards, entropy_reward


def is_zero_std(rewards: Sequence[float] | np.ndarray) -> bool:
    return float(np.std(np.asarray(rewards, dtype=np.float64))) < ZERO_STD_THRESHOLD


def normalize_advantages(rewards: Sequence[float] | np.ndarray) -> np.ndarray:
    """Group-normalized advantages with the population std; zeros for a zero-variance group."""
    values = np.asarray(rewards, dtype=np.float64)
    if values.size < 2:
        raise ValueError(f"Advantage normalization needs a group of at least 2, got {values.size}")
    std = float(np.std(values))
    if std < ZERO_STD_THRESHOLD:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def token_cosine(q_a: np.ndarray, q_b: np.ndarray) -> float:
    a, b = np.asarray(q_a, dtype=np.float64), np.asarray(q_b, dtype=np.float64)
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("Cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def opposite_sign_similarity(advantages: np.ndarray, tokens: np.ndarray, cb: Codebook) -> np.ndarray:
    """``Sim[i, t]``: mean cosine between token ``(i, t)`` and position ``t`` of every rollout ``j`` with ``A_i * A_j <= 0``."""
    adv = np.asarray(advantages, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] != adv.size:
        raise ValueError(f"Token matrix {tokens.shape} does not match {adv.size} advantages")
    if not np.any(adv):
        raise ValueError("Similarity is undefined for a skipped zero-variance group")
    q = cb.embeddings[tokens]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    cos = np.clip(np.einsum("itc,jtc->tij", q, q), -1.0, 1.0)
    # identical tokens are exactly parallel
    cos[(tokens[:, None, :] == tokens[None, :, :]).transpose(2, 0, 1)] = 1.0
    partners = (adv[:, None] * adv[None, :] <= 0).astype(np.float64)
    counts = partners.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("Some rollout has no opposite-sign partner")
    return (np.einsum("tij,ij->it", cos, partners) / counts[:, None]).clip(-1.0, 1.0)


def similarity_mask(sim: np.ndarray) -> np.ndarray:
    return np.clip((1.0 - np.asarray(sim, dtype=np.float64)) / 2.0, 0.0, 1.0)


def reweight_advantages(advantages: np.ndarray, mask: np.ndarray) -> np.ndarray:
    adv = np.asarray(advantages, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or mask.shape[0] != adv.size:
        raise ValueError(f"Mask shape {mask.shape} does not match {adv.size} advantages")
    return adv[:, None] * mask


def kl_weights(sim: np.ndarray, beta: float, bounds: tuple[float, float] = (0.0, 2.0)) -> np.ndarray:
    """``(0.5 + 0.5 * clip(Sim + 1, *bounds)) * beta``."""
    if beta < 0:
        raise ValueError(f"KL coefficient must be non-negative, got {beta}")
    low, high = bounds
    return (0.5 + 0.5 * np.clip(np.asarray(sim, dtype=np.float64) + 1.0, low, high)) * beta


def importance_ratio(logp_new: Tensor, logp_old: np.ndarray) -> tuple[Tensor, bool]:
    """``exp(logp_new - logp_old)`` with the exponent held to +/-30; the flag reports a clamp."""
    old = np.asarray(logp_old, dtype=np.float64)
    if logp_new.shape != old.shape:
        raise ValueError(f"logp_new {logp_new.shape} and logp_old {old.shape} differ")
    diff = nx.sub(logp_new, old)
    clamped = bool(np.any(np.abs(diff.data) > RATIO_EXPONENT_CLAMP))
    if clamped:
        logger.warning("Importance ratio exponent clamped to +/-30")
    return nx.exp(nx.clip(diff, -RATIO_EXPONENT_CLAMP, RATIO_EXPONENT_CLAMP)), clamped


def kl_from_log_probs(log_p: Tensor, log_q: np.ndarray) -> tuple[Tensor, int]:
    """Exact categorical KL(p || q) along the last axis; ``q`` is floored at 1e-12 in log space."""
    floor = np.log(KL_LOG_FLOOR)
    log_q = np.asarray(log_q, dtype=np.float64)
    hits = int(np.sum((log_q < floor) & (log_p.data >= floor)))
    floored = np.maximum(log_q, floor)
    kl = nx.sum(nx.mul(nx.exp(log_p), nx.sub(log_p, floored)), axis=-1)
    return kl, hits


def exact_kl(theta: PolicyParams, ref: PolicyParams, r: Rollout) -> Tensor:
    cond, tokens = rollout_batch(theta, [r])
    with nx.no_grad():
        ref_lp = [lp.data for lp in policy_log_probs(ref, cond, tokens)]
    per_step = [kl_from_log_probs(lp, q)[0] for lp, q in zip(policy_log_probs(theta, cond, tokens), ref_lp)]
    return nx.sum(nx.stack(per_step, axis=1), axis=0)


@dataclass
class Group:
    """G rollouts of one prompt with everything the update needs."""

    prompt: PromptSpec
    rollouts: list[Rollout]
    base_rewards: np.ndarray
    entropy_rewards: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    similarity: np.ndarray
    mask: np.ndarray
    reweighted: np.ndarray
    kl_weights: np.ndarray
    h_theta: np.ndarray
    h_ref: np.ndarray
    skipped: bool = False

    @property
    def tokens(self) -> np.ndarray:
        return np.stack([r.tokens for r in self.rollouts])

    @property
    def logp_old(self) -> np.ndarray:
        return np.stack([r.logp_old for r in self.rollouts])

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt": self.prompt.model_dump(),
            "tokens": self.tokens.tolist(),
            "base_rewards": self.base_rewards.tolist(),
            "rewards": self.rewards.tolist(),
            "advantages": self.advantages.tolist(),
            "similarity": self.similarity.tolist(),
            "mask": self.mask.tolist(),
            "kl_weights": self.kl_weights.tolist(),
            "h_theta": self.h_theta.tolist(),
            "h_ref": self.h_ref.tolist(),
            "skipped": self.skipped,
        }


def build_group(
    prompt: PromptSpec,
    rollouts: Sequence[Rollout],
    base_rewards: Sequence[float] | np.ndarray,
    h_theta: Sequence[float] | np.ndarray,
    h_ref: Sequence[float] | np.ndarray,
    cb: Codebook,
    cfg: TrainConfig,
) -> Group:
    """Entropy reward, combined reward, normalization, reweighting and KL weights for one group."""
    validate_same_length(rollouts=rollouts, base_rewards=base_rewards, h_theta=h_theta, h_ref=h_ref)
    base = np.asarray(base_rewards, dtype=np.float64)
    h_theta = np.asarray(h_theta, dtype=np.float64)
    h_ref = np.asarray(h_ref, dtype=np.float64)
    r_ent = np.asarray(entropy_reward(h_ref, h_theta), dtype=np.float64).reshape(base.shape)
    combined = combine_rewards(base, r_ent, cfg.entropy_lambda, cfg.entropy_reward_mode)
    tokens = np.stack([r.tokens for r in rollouts])
    G, T = tokens.shape

    skipped = is_zero_std(combined)
    advantages = normalize_advantages(combined)
    if skipped:
        similarity = np.zeros((G, T))
        mask = np.ones((G, T))
        beta = 0.0 if cfg.drop_kl_on_zero_std else cfg.kl_beta
        weights = np.full((G, T), beta)
    else:
        similarity = opposite_sign_similarity(advantages, tokens, cb)
        mask = similarity_mask(similarity) if cfg.reweight_advantage else np.ones((G, T))
        if cfg.reweight_kl:
            weights = kl_weights(similarity, cfg.kl_beta, cfg.beta_clip_bounds)
        else:
            weights = np.full((G, T), cfg.kl_beta)
    return Group(
        prompt=prompt,
        rollouts=list(rollouts),
        base_rewards=base,
        entropy_rewards=r_ent,
        rewards=combined,
        advantages=advantages,
        similarity=similarity,
        mask=mask,
        reweighted=reweight_advantages(advantages, mask),
        kl_weights=weights,
        h_theta=h_theta,
        h_ref=h_ref,
        skipped=skipped,
    )


def clipped_objective(
    reweighted: np.ndarray,
    kl_weight: np.ndarray,
    logp_old: np.ndarray,
    logp_new: Tensor,
    kl_per_token: Tensor,
    clip_eps: float,
) -> tuple[Tensor, UpdateStats]:
    """Mean over rollouts and positions of ``min(r*A, clip(r)*A) - beta' * KL``."""
    if not 0.0 < clip_eps < 1.0:
        raise ValueError(f"clip_eps must lie in (0, 1), got {clip_eps}")
    shapes = {tuple(np.shape(reweighted)), tuple(np.shape(kl_weight)), tuple(np.shape(logp_old)), logp_new.shape, kl_per_token.shape}
    if len(shapes) != 1:
        raise ValueError(f"Objective inputs must share one [G, T] shape, got {sorted(shapes)}")
    ratio, clamped = importance_ratio(logp_new, logp_old)
    unclipped = nx.mul(ratio, reweighted)
    clipped = nx.mul(nx.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), reweighted)
    surrogate = nx.minimum(unclipped, clipped)
    objective = nx.mean(nx.sub(surrogate, nx.mul(kl_per_token, kl_weight)))
    stats = UpdateStats(
        surrogate=float(np.mean(surrogate.data)),
        mean_kl=float(np.mean(kl_per_token.data)),
        clip_fraction=float(np.mean(clipped.data < unclipped.data)),
        ratio_clamped=clamped,
    )
    return objective, stats


def grpo_objective(group: Group, logp_new: Tensor, kl_per_token: Tensor, clip_eps: float) -> tuple[Tensor, UpdateStats]:
    """Objective to maximize for one group."""
    return clipped_objective(group.reweighted, group.kl_weights, group.logp_old, logp_new, kl_per_token, clip_eps)


def group_log_probs(theta: PolicyParams, group: Group) -> Tensor:
    cond, tokens = rollout_batch(theta, group.rollouts)
    return gather_tokens(policy_log_probs(theta, cond, tokens), tokens)
