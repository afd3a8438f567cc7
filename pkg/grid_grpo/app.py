from grid_grpo.checkpoint import load_checkpoint, save_checkpoint
from grid_grpo.cli import cli
from grid_grpo.codebook import build_codebook, embed, render_grid
from grid_grpo.contract import validate_prompt, validate_step_grids, validate_temperatures, validate_token_ids
from grid_grpo.grpo import (
    build_group,
    exact_kl,
    grpo_objective,
    importance_ratio,
    kl_weights,
    normalize_advantages,
    opposite_sign_similarity,
    reweight_advantages,
    similarity_mask,
    token_cosine,
)
from grid_grpo.numerics import backward, finite_diff_check, softmax
from grid_grpo.policy import (
    encode_prompt,
    forward_logits,
    init_params,
    pretrain_step,
    sample_rollout,
    sequence_entropy,
    teacher_forced_logprobs,
    token_entropies,
)
from grid_grpo.report import compare_runs
from grid_grpo.rewards import (
    combine_rewards,
    counting_reward,
    edit_distance,
    entropy_loss_ablation,
    entropy_reward,
    position_reward,
    region_reward,
    text_reward,
)
from grid_grpo.trainer import evaluate, run_pretrain, run_rl, temperature_sweep


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
