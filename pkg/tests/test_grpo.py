import math

import numpy as np
import pytest

from grid_grpo import numerics as nx
from grid_grpo.codebook import build_codebook
from grid_grpo.grpo import (
    build_group,
    clipped_objective,
    exact_kl,
    grpo_objective,
    group_log_probs,
    importance_ratio,
    is_zero_std,
    kl_from_log_probs,
    kl_weights,
    normalize_advantages,
    opposite_sign_similarity,
    reweight_advantages,
    similarity_mask,
    token_cosine,
)
from grid_grpo.models.config import TrainConfig
from grid_grpo.models.prompts import GridShape, PromptSpec
from grid_grpo.numerics import Rng, Tape, Tensor, finite_diff_check
from grid_grpo.policy import (
    Rollout,
    gather_tokens,
    init_params,
    policy_log_probs,
    rollout_batch,
    sample_rollout,
    sample_rollouts,
    token_entropy_matrix,
)
from grid_grpo.rewards import entropy_loss_ablation

CB = build_codebook(V=64, C=16, K=8, intra_noise=0.1, seed=7)
PROMPT = PromptSpec(task="counting", categories=[1], target_count=3)


def _make_rollout(tokens) -> Rollout:
    tokens = np.asarray(tokens, dtype=np.int64)
    return Rollout(prompt=PROMPT, tokens=tokens, logp_old=np.full(tokens.shape, -1.0), temperature=1.0)


def _make_config(**overrides) -> TrainConfig:
    return TrainConfig(group_size=2, entropy_reward_mode="off", **overrides)


def _brute_similarity(advantages, tokens, cb):
    G, T = tokens.shape
    sim = np.zeros((G, T))
    for i in range(G):
        partners = [j for j in range(G) if advantages[i] * advantages[j] <= 0]
        for t in range(T):
            sim[i, t] = np.mean(
                [token_cosine(cb.embeddings[tokens[i, t]], cb.embeddings[tokens[j, t]]) for j in partners]
            )
    return sim


def test_normalize_advantages_example():
    assert normalize_advantages([1.0, 0.0, 0.0, 1.0]).tolist() == [1.0, -1.0, -1.0, 1.0]


def test_normalize_advantages_zero_variance_group():
    assert is_zero_std([0.4, 0.4, 0.4])
    assert normalize_advantages([0.4, 0.4, 0.4]).tolist() == [0.0, 0.0, 0.0]


def test_normalize_advantages_moments():
    advantages = normalize_advantages(Rng(3).uniform(8))
    assert abs(advantages.sum()) <= 1e-9
    assert abs(np.var(advantages) - 1.0) <= 1e-9


def test_normalize_advantages_needs_a_group():
    with pytest.raises(ValueError, match="at least 2"):
        normalize_advantages([1.0])


def test_token_cosine_examples():
    q = np.array([0.3, -1.2, 2.0])
    assert token_cosine(q, q) == pytest.approx(1.0)
    assert token_cosine(q, -q) == pytest.approx(-1.0)
    assert token_cosine(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])) == 0.0


def test_token_cosine_zero_vector():
    with pytest.raises(ValueError, match="zero vector"):
        token_cosine(np.zeros(3), np.ones(3))


def test_similarity_of_shared_token_is_one():
    tokens = np.array([[5, 1, 2, 3], [5, 40, 50, 60]])
    sim = opposite_sign_similarity(np.array([1.0, -1.0]), tokens, CB)
    assert sim[0, 0] == 1.0
    assert sim[1, 0] == 1.0


def test_similarity_of_orthogonal_counterparts_is_zero():
    cb = build_codebook(V=16, C=16, K=16, intra_noise=0.0, seed=3)
    tokens = np.array([[0, 1, 2], [3, 4, 5]])
    sim = opposite_sign_similarity(np.array([1.0, -1.0]), tokens, cb)
    assert np.max(np.abs(sim)) < 1e-12


def test_similarity_matches_brute_force():
    rng = Rng(5)
    tokens = rng.integers(0, 64, size=(4, 6))
    advantages = normalize_advantages([1.0, 0.0, 0.5, 0.2])
    expected = _brute_similarity(advantages, tokens, CB)
    assert np.allclose(opposite_sign_similarity(advantages, tokens, CB), expected, atol=1e-12)


def test_similarity_rejects_skipped_group():
    with pytest.raises(ValueError, match="zero-variance"):
        opposite_sign_similarity(np.zeros(2), np.zeros((2, 3), dtype=np.int64), CB)


def test_similarity_mask_examples():
    assert similarity_mask(np.array([[1.0, -1.0, 0.0]])).tolist() == [[0.0, 1.0, 0.5]]


def test_reweight_advantages_examples():
    mask = np.array([[0.0, 1.0], [0.0, 0.5]])
    out = reweight_advantages(np.array([-2.0, 1.732]), mask)
    assert out[:, 0].tolist() == [0.0, 0.0]
    assert out[0, 1] == -2.0
    assert out[1, 1] == pytest.approx(0.866)


def test_reweight_advantages_identity_mask():
    advantages = np.array([0.5, -0.5, 1.0])
    out = reweight_advantages(advantages, np.ones((3, 4)))
    assert np.array_equal(out, np.repeat(advantages[:, None], 4, axis=1))


@pytest.mark.parametrize("sim, factor", [(1.0, 1.5), (-1.0, 0.5), (0.0, 1.0)])
def test_kl_weights(sim, factor):
    assert kl_weights(np.array([[sim]]), 0.03)[0, 0] == pytest.approx(factor * 0.03)


def test_kl_weights_stay_in_range():
    sim = Rng(1).uniform((5, 7)) * 2.0 - 1.0
    weights = kl_weights(sim, 0.1)
    assert np.all(weights >= 0.05 - 1e-15)
    assert np.all(weights <= 0.15 + 1e-15)


def test_importance_ratio_examples():
    old = np.log(np.array([[0.2, 0.5]]))
    same, clamped = importance_ratio(Tensor(old), old)
    doubled, _ = importance_ratio(Tensor(old + math.log(2.0)), old)
    assert not clamped
    assert np.allclose(same.data, 1.0, atol=1e-15)
    assert np.allclose(doubled.data, 2.0)


def test_importance_ratio_clamps_exponent():
    ratio, clamped = importance_ratio(Tensor([[0.0]]), np.array([[-40.0]]))
    assert clamped
    assert ratio.item() == pytest.approx(math.exp(30.0))


def test_importance_ratio_shape_mismatch():
    with pytest.raises(ValueError, match="differ"):
        importance_ratio(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_objective_on_policy_is_mean_advantage():
    reweighted = np.array([[1.0, -0.5], [0.25, 0.0]])
    logp_old = np.log(np.array([[0.3, 0.6], [0.1, 0.9]]))
    objective, stats = clipped_objective(
        reweighted, np.full((2, 2), 0.03), logp_old, Tensor(logp_old), Tensor(np.zeros((2, 2))), 0.2
    )
    assert objective.item() == pytest.approx(0.1875)
    assert stats.clip_fraction == 0.0
    assert stats.mean_kl == 0.0


def test_objective_uses_clipped_branch_for_large_ratio():
    logp_old = np.full((2, 2), -2.0)
    logp_new = Tensor(logp_old + math.log(1.5))
    objective, stats = clipped_objective(
        np.ones((2, 2)), np.zeros((2, 2)), logp_old, logp_new, Tensor(np.zeros((2, 2))), 0.2
    )
    assert objective.item() == pytest.approx(1.2)
    assert stats.clip_fraction == 1.0


def test_objective_with_zero_advantage_has_zero_gradient():
    logp_new = Tensor(np.full((2, 3), -1.0), requires_grad=True)
    with Tape() as tape:
        objective, _ = clipped_objective(
            np.zeros((2, 3)), np.full((2, 3), 0.03), np.full((2, 3), -1.2), logp_new, Tensor(np.zeros((2, 3))), 0.2
        )
        grads = tape.backward(objective)
    assert objective.item() == 0.0
    assert np.all(grads[logp_new] == 0.0)


def test_objective_subtracts_weighted_kl():
    logp_old = np.full((1, 2), -1.0)
    kl = Tensor(np.array([[0.5, 1.0]]))
    objective, stats = clipped_objective(np.zeros((1, 2)), np.array([[0.1, 0.2]]), logp_old, Tensor(logp_old), kl, 0.2)
    assert objective.item() == pytest.approx(-(0.05 + 0.2) / 2)
    assert stats.mean_kl == pytest.approx(0.75)


def test_objective_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="share one"):
        clipped_objective(
            np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), 0.2
        )


def test_objective_rejects_bad_clip_range():
    with pytest.raises(ValueError, match="clip_eps"):
        clipped_objective(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), Tensor([[0.0]]), Tensor([[0.0]]), 1.5)


def test_kl_of_point_mass_against_uniform():
    log_p = nx.log_softmax(np.array([0.0, -1000.0]))
    kl, hits = kl_from_log_probs(log_p, np.log([0.5, 0.5]))
    assert kl.item() == pytest.approx(math.log(2.0))
    assert hits == 0


def test_kl_is_non_negative():
    rng = Rng(12)
    log_p = nx.log_softmax(rng.normal((1000, 8)) * 3.0)
    log_q = nx.log_softmax(rng.normal((1000, 8)) * 3.0).data
    kl, _ = kl_from_log_probs(log_p, log_q)
    assert np.all(kl.data >= -1e-12)


def test_kl_counts_floor_hits():
    log_p = nx.log_softmax(np.zeros(3))
    _, hits = kl_from_log_probs(log_p, np.array([0.0, -100.0, -200.0]))
    assert hits == 2


def test_exact_kl_of_identical_policies_is_zero():
    theta = init_params(GridShape(h=3, w=3), 4, 16, 8, Rng(0))
    rollout = sample_rollout(theta, PROMPT, 1.0, Rng(1))
    kl = exact_kl(theta, theta.snapshot(), rollout)
    assert kl.shape == (9,)
    assert np.max(np.abs(kl.data)) <= 1e-12


def test_conflicting_shared_token_cancels_advantage():
    rollouts = [_make_rollout([5, 1, 2, 3]), _make_rollout([5, 40, 50, 60])]
    group = build_group(PROMPT, rollouts, [1.0, 0.0], [2.0, 2.0], [2.0, 2.0], CB, _make_config())
    assert group.advantages.tolist() == [1.0, -1.0]
    assert group.reweighted[:, 0].tolist() == [0.0, 0.0]
    assert np.all(group.reweighted[:, 1:] != 0.0)
    assert group.kl_weights[:, 0] == pytest.approx([0.045, 0.045])


def test_shared_token_cancels_advantage_in_random_groups():
    for seed in range(100):
        rng = Rng(seed)
        G, T = int(rng.integers(2, 9)), int(rng.integers(2, 10))
        rewards = rng.uniform(G)
        rewards[0] += 1.0
        tokens = rng.integers(0, 64, size=(G, T))
        t = int(rng.integers(0, T))
        tokens[:, t] = int(rng.integers(0, 64))
        rollouts = [_make_rollout(row) for row in tokens]
        group = build_group(PROMPT, rollouts, rewards, np.ones(G), np.ones(G), CB, _make_config())
        assert not group.skipped
        assert np.all(group.reweighted[:, t] == 0.0), seed


def test_normalized_advantages_have_unit_moments_across_random_groups():
    rng = Rng(21)
    for _ in range(1000):
        size = int(rng.integers(2, 17))
        rewards = rng.normal(size) * (0.1 + 10.0 * rng.uniform()) + (rng.uniform() - 0.5) * 10.0
        advantages = normalize_advantages(rewards)
        assert abs(advantages.mean()) <= 1e-9
        assert abs(np.var(advantages) - 1.0) <= 1e-9


def test_mask_falls_and_kl_weight_rises_with_similarity():
    sim = np.linspace(-1.0, 1.0, 2001)[None, :]
    mask = similarity_mask(sim)[0]
    factor = kl_weights(sim, 0.2)[0] / 0.2
    assert np.all(np.diff(mask) < 0.0)
    assert mask[0] == 1.0 and mask[-1] == 0.0
    assert np.all((mask >= 0.0) & (mask <= 1.0))
    assert np.all(np.diff(factor) > 0.0)
    assert factor[0] == pytest.approx(0.5) and factor[-1] == pytest.approx(1.5)


def test_kl_vanishes_only_for_identical_distributions():
    rng = Rng(13)
    log_p = nx.log_softmax(rng.normal((200, 6)))
    same, _ = kl_from_log_probs(log_p, log_p.data)
    other, _ = kl_from_log_probs(log_p, nx.log_softmax(rng.normal((200, 6))).data)
    assert np.all(np.abs(same.data) <= 1e-12)
    assert np.all(other.data > 1e-12)


def test_build_group_with_reweighting_off():
    rollouts = [_make_rollout([5, 1, 2, 3]), _make_rollout([5, 40, 50, 60])]
    cfg = _make_config(reweight_advantage=False, reweight_kl=False)
    group = build_group(PROMPT, rollouts, [1.0, 0.0], [2.0, 2.0], [2.0, 2.0], CB, cfg)
    assert np.array_equal(group.reweighted, np.repeat(group.advantages[:, None], 4, axis=1))
    assert np.all(group.kl_weights == cfg.kl_beta)


@pytest.mark.parametrize("drop, beta", [(False, 0.03), (True, 0.0)])
def test_build_group_skips_zero_variance(drop, beta):
    rollouts = [_make_rollout([1, 2, 3, 4]), _make_rollout([4, 3, 2, 1])]
    group = build_group(PROMPT, rollouts, [0.5, 0.5], [2.0, 2.0], [2.0, 2.0], CB, _make_config(drop_kl_on_zero_std=drop))
    assert group.skipped
    assert np.all(group.reweighted == 0.0)
    assert np.all(group.kl_weights == beta)
    assert group.to_dict()["skipped"] is True


def test_build_group_entropy_bonus_goes_to_top_reward():
    rollouts = [_make_rollout([1, 2]), _make_rollout([3, 4]), _make_rollout([5, 6])]
    cfg = TrainConfig(group_size=3, entropy_reward_mode="top", entropy_lambda=0.4)
    group = build_group(PROMPT, rollouts, [0.6, 0.9, 0.9], [1.0, 1.0, 2.0], [1.0, 2.0, 2.0], CB, cfg)
    assert group.entropy_rewards == pytest.approx([1.0, 0.5, 1.0])
    assert group.rewards == pytest.approx([0.6, 1.1, 1.3])


def test_build_group_length_mismatch():
    with pytest.raises(ValueError):
        build_group(PROMPT, [_make_rollout([1, 2])], [0.5, 0.1], [1.0], [1.0], CB, _make_config())


def _vanilla_objective(advantages, beta, logp_old, logp_new, kl, eps):
    ratio = np.exp(np.clip(logp_new - logp_old, -30.0, 30.0))
    surrogate = np.minimum(ratio * advantages[:, None], np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages[:, None])
    terms = surrogate - kl * beta
    return np.sum(terms) / terms.size


def _make_small_group(cfg: TrainConfig, seed: int = 0):
    shape = GridShape(h=2, w=2)
    cb = build_codebook(V=8, C=4, K=2, intra_noise=0.1, seed=seed)
    theta = init_params(shape, 2, 8, 4, Rng(seed))
    ref = init_params(shape, 2, 8, 4, Rng(seed + 1)).snapshot()
    prompt = PromptSpec(task="counting", categories=[1], target_count=2)
    rollouts = sample_rollouts(theta.snapshot(), [prompt, prompt], 1.0, Rng(seed + 2))
    group = build_group(prompt, rollouts, [1.0, 0.0], [1.2, 1.5], [1.4, 1.4], cb, cfg)
    return theta, ref, group


def _small_config(**overrides) -> TrainConfig:
    return TrainConfig(
        grid_h=2, grid_w=2, vocab_size=8, embed_dim=4, num_categories=2, hidden_size=4,
        group_size=2, max_count=4, **overrides,
    )


def test_flags_off_recover_vanilla_objective():
    cfg = _small_config(reweight_advantage=False, reweight_kl=False, entropy_reward_mode="off")
    theta, ref, group = _make_small_group(cfg)
    cond, tokens = rollout_batch(theta, group.rollouts)
    ref_lp = [lp.data for lp in policy_log_probs(ref, cond, tokens)]
    new_lp = policy_log_probs(theta, cond, tokens)
    kl = nx.stack([kl_from_log_probs(lp, q)[0] for lp, q in zip(new_lp, ref_lp)], axis=1)
    logp_new = group_log_probs(theta, group)
    # ratios above 1 + eps: the positive rollout takes the clipped branch, the negative one the unclipped
    group.rollouts = [
        Rollout(r.prompt, r.tokens, r.logp_old - offset, 1.0) for r, offset in zip(group.rollouts, (0.5, 0.3))
    ]
    objective, _ = grpo_objective(group, logp_new, kl, cfg.clip_eps)
    expected = _vanilla_objective(group.advantages, cfg.kl_beta, group.logp_old, logp_new.data, kl.data, cfg.clip_eps)
    assert objective.item() == expected


@pytest.mark.parametrize("offset", [0.0, 0.5])
@pytest.mark.parametrize("ablation", [False, True])
def test_full_objective_gradient_matches_finite_differences(offset, ablation):
    cfg = _small_config(entropy_loss_ablation=ablation)
    theta, ref, group = _make_small_group(cfg, seed=4)
    cond, tokens = rollout_batch(theta, group.rollouts)
    ref_lp = [lp.data for lp in policy_log_probs(ref, cond, tokens)]
    h_ref = np.array([1.4, 1.4])

    def loss(w):
        theta.tensors["W_out"] = w
        new_lp = policy_log_probs(theta, cond, tokens)
        kl = nx.stack([kl_from_log_probs(lp, q)[0] for lp, q in zip(new_lp, ref_lp)], axis=1)
        objective, _ = clipped_objective(
            group.reweighted, group.kl_weights, group.logp_old - offset, gather_tokens(new_lp, tokens), kl, cfg.clip_eps
        )
        total = nx.neg(objective)
        if ablation:
            h_new = nx.mean(token_entropy_matrix(new_lp), axis=1)
            total = nx.add(total, entropy_loss_ablation(nx.sub(h_ref, h_new), cfg.entropy_lambda))
        return total

    assert finite_diff_check(loss, theta.tensors["W_out"].data.copy()) <= 1e-4
