import time
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from loguru import logger

from grid_grpo import numerics as nx
from grid_grpo.checkpoint import load_checkpoint, save_checkpoint
from grid_grpo.codebook import Codebook, build_codebook, render_grid
from grid_grpo.constants import (
    CONFIG_FILE,
    EVAL_FILE,
    METRICS_FILE,
    MONOTONICITY_TOLERANCE,
    NAN_DUMP_FILE,
    POLICY_CHECKPOINT,
    REFERENCE_CHECKPOINT,
    RENDERS_DIR,
    STREAM_EVAL,
    STREAM_INIT,
    STREAM_PRETRAIN,
    STREAM_PROMPTS,
    STREAM_SAMPLING,
    SWEEP_COLUMNS,
    SWEEP_SAMPLES,
    TASKS,
)
from grid_grpo.contract import validate_temperatures
from grid_grpo.grpo import Group, build_group, clipped_objective, kl_from_log_probs
from grid_grpo.models.config import TrainConfig, save_config
from grid_grpo.models.prompts import PromptRecord, PromptSpec
from grid_grpo.models.records import EvalReport, MetricsRecord, TaskScore
from grid_grpo.numerics import NumericalError, Rng
from grid_grpo.optim import Adam, clip_grad_norm, global_grad_norm
from grid_grpo.policy import (
    PolicyParams,
    gather_tokens,
    init_params,
    policy_log_probs,
    pretrain_step,
    rollout_batch,
    sample_rollouts,
    token_entropy_matrix,
)
from grid_grpo.report import MetricsWriter, append_eval, dump_groups, write_table
from grid_grpo.rewards import entropy_loss_ablation, score
from grid_grpo.tasks import draw_from_prompt_set, heldout_prompts, sample_prompts, synthesize_grid


class MonotonicityError(NumericalError):
    """Mean sample entropy decreased somewhere along a temperature sweep."""

    def __init__(self, message: str, table: pd.DataFrame) -> None:
        super().__init__(f"{message}\n{table.to_string(index=False)}")
        self.table = table


def codebook_for(cfg: TrainConfig) -> Codebook:
    return build_codebook(cfg.vocab_size, cfg.embed_dim, cfg.num_categories, cfg.intra_noise, cfg.seed)


def heldout_set(cfg: TrainConfig, tasks: Sequence[str] | None = None) -> list[PromptSpec]:
    return [
        prompt
        for task in (tasks if tasks is not None else cfg.active_tasks)
        for prompt in heldout_prompts(
            task, cfg.eval_prompts_per_task, cfg.eval_seed, cfg.shape, cfg.num_categories, cfg.max_count
        )
    ]


def _adam(theta: PolicyParams, cfg: TrainConfig, lr: float) -> Adam:
    return Adam(theta.ordered(), lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def _check_dims(theta: PolicyParams, cfg: TrainConfig) -> None:
    found = (theta.shape.h, theta.shape.w, theta.num_categories, theta.vocab_size)
    wanted = (cfg.grid_h, cfg.grid_w, cfg.num_categories, cfg.vocab_size)
    if found != wanted:
        raise ValueError(f"Checkpoint dimensions (h, w, K, V)={found} do not match config {wanted}")


def evaluate(
    theta: PolicyParams,
    cb: Codebook,
    prompts: Sequence[PromptSpec],
    n_samples: int,
    temperature: float,
    seed: int,
    counting_clamp: bool = True,
    cfg_scale: float = 1.0,
) -> EvalReport:
    """Sample ``n_samples`` grids per prompt and score them.

    Each task draws from its own stream, so a task's numbers do not depend on
    which other tasks share the prompt set.
    """
    if not prompts:
        raise ValueError("Cannot evaluate on an empty prompt set")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    per_task: dict[str, TaskScore] = {}
    all_rewards: list[float] = []
    all_entropies: list[float] = []
    for task in TASKS:
        chosen = [p for p in prompts if p.task == task]
        if not chosen:
            continue
        expanded = [p for p in chosen for _ in range(n_samples)]
        rng = Rng(seed, (STREAM_EVAL, TASKS.index(task)))
        rollouts = sample_rollouts(theta, expanded, temperature, rng, cfg_scale=cfg_scale)
        rewards = np.array([score(r.tokens, cb, r.prompt, theta.shape, counting_clamp) for r in rollouts])
        entropies = np.array([float(r.sample_entropies.mean()) for r in rollouts])
        per_task[task] = TaskScore(
            mean_reward=float(rewards.mean()),
            std_reward=float(rewards.std()),
            mean_entropy=float(entropies.mean()),
            samples=len(rollouts),
        )
        all_rewards.extend(rewards.tolist())
        all_entropies.extend(entropies.tolist())
    overall = TaskScore(
        mean_reward=float(np.mean(all_rewards)),
        std_reward=float(np.std(all_rewards)),
        mean_entropy=float(np.mean(all_entropies)),
        samples=len(all_rewards),
    )
    return EvalReport(temperature=temperature, n_samples=n_samples, per_task=per_task, overall=overall)


def temperature_sweep(
    theta: PolicyParams,
    cb: Codebook,
    prompts: Sequence[PromptSpec],
    temperatures: Sequence[float],
    n_samples: int = 1,
    seed: int = 0,
) -> pd.DataFrame:
    rows = []
    for temperature in validate_temperatures(temperatures):
        report = evaluate(theta, cb, prompts, n_samples, temperature, seed)
        rows.append([temperature, report.overall.mean_entropy, report.overall.mean_reward])
        logger.info(
            f"temperature {temperature}: entropy {report.overall.mean_entropy:.4f}, "
            f"reward {report.overall.mean_reward:.4f}"
        )
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def check_entropy_monotone(table: pd.DataFrame) -> None:
    entropy = table["mean_entropy"].to_numpy()
    if np.any(np.diff(entropy) < -MONOTONICITY_TOLERANCE):
        raise MonotonicityError("Mean sample entropy is not non-decreasing in temperature", table)


def pretrain_batch(cfg: TrainConfig, cb: Codebook, rng: Rng) -> list[tuple[PromptSpec, np.ndarray]]:
    """Prompt-satisfying grids over all tasks, with uniform label noise."""
    weights = {task: 1.0 for task in TASKS}
    prompts = sample_prompts(weights, cfg.pretrain_batch_size, cfg.shape, cfg.num_categories, rng, cfg.max_count)
    return [(p, synthesize_grid(p, cb, cfg.shape, rng, cfg.label_noise)) for p in prompts]


def run_pretrain(cfg: TrainConfig, output_dir: Path) -> tuple[Path, EvalReport]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, output_dir / CONFIG_FILE)
    cb = codebook_for(cfg)
    root = Rng(cfg.seed)
    theta = init_params(cfg.shape, cfg.num_categories, cfg.vocab_size, cfg.hidden_size, root.child(STREAM_INIT))
    logger.info(f"Pretraining a policy with {theta.num_parameters} parameters for {cfg.pretrain_steps} steps")
    optimizer = _adam(theta, cfg, cfg.pretrain_learning_rate)

    for step in range(cfg.pretrain_steps):
        loss = pretrain_step(theta, optimizer, pretrain_batch(cfg, cb, root.child(STREAM_PRETRAIN, step)))
        if step % 100 == 0 or step == cfg.pretrain_steps - 1:
            logger.info(f"pretrain step {step}: nll {loss:.4f}")

    checkpoint = save_checkpoint(theta, output_dir / REFERENCE_CHECKPOINT)
    report = evaluate(
        theta, cb, heldout_set(cfg, TASKS), cfg.eval_samples, cfg.temperature, cfg.eval_seed, cfg.counting_clamp
    )
    append_eval(output_dir / EVAL_FILE, cfg.pretrain_steps, report)
    for task, task_score in report.per_task.items():
        logger.info(f"held-out {task} reward {task_score.mean_reward:.4f}")
    return checkpoint, report


def _average(pending: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    return [np.sum(stacked, axis=0) / len(pending) for stacked in map(np.stack, zip(*pending))]


def _apply(optimizer: Adam, pending: list[list[np.ndarray]], max_grad_norm: float | None) -> float:
    """One Adam step on the mean of the accumulated gradients; empties ``pending``."""
    clipped, norm = clip_grad_norm(_average(pending), max_grad_norm)
    optimizer.step(clipped)
    pending.clear()
    return norm


def _task_means(rewards: np.ndarray, prompts: Sequence[PromptSpec]) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    tasks = np.array([p.task for p in prompts])
    for task in TASKS:
        chosen = rewards[tasks == task]
        out[f"reward_{task}"] = float(chosen.mean()) if chosen.size else None
    return out


def run_rl(
    cfg: TrainConfig,
    ref_checkpoint: Path,
    output_dir: Path,
    prompt_set: Sequence[PromptRecord] | None = None,
) -> Path:
    """Fine-tune from the reference policy; writes metrics, evaluations, renders and the final checkpoint."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, output_dir / CONFIG_FILE)
    eval_path = output_dir / EVAL_FILE
    eval_path.unlink(missing_ok=True)
    if cfg.render_every:
        (output_dir / RENDERS_DIR).mkdir(exist_ok=True)

    cb = codebook_for(cfg)
    ref = load_checkpoint(ref_checkpoint, trainable=False).snapshot()
    _check_dims(ref, cfg)
    theta = ref.trainable()
    params = theta.ordered()
    optimizer = _adam(theta, cfg, cfg.learning_rate)
    root = Rng(cfg.seed)
    writer = MetricsWriter(output_dir / METRICS_FILE, include_wall_clock=cfg.log_wall_clock)
    heldout = heldout_set(cfg) if cfg.eval_every else []
    G = cfg.group_size
    pending: list[list[np.ndarray]] = []

    for step in range(cfg.total_steps):
        started = time.perf_counter()
        old = theta.snapshot()
        prompt_rng = root.child(STREAM_PROMPTS, step)
        if prompt_set:
            prompts = draw_from_prompt_set(prompt_set, cfg.batch_size, prompt_rng)
        else:
            prompts = sample_prompts(
                cfg.task_weights, cfg.batch_size, cfg.shape, cfg.num_categories, prompt_rng, cfg.max_count
            )
        expanded = [p for p in prompts for _ in range(G)]
        rollouts = sample_rollouts(
            old, expanded, cfg.temperature, root.child(STREAM_SAMPLING, step), cfg_scale=cfg.cfg_scale
        )
        base = np.array([score(r.tokens, cb, r.prompt, cfg.shape, cfg.counting_clamp) for r in rollouts])

        cond, tokens = rollout_batch(old, rollouts)
        with nx.no_grad():
            h_old = token_entropy_matrix(policy_log_probs(old, cond, tokens)).data.mean(axis=1)
            ref_lp = [lp.data for lp in policy_log_probs(ref, cond, tokens)]
        h_ref = np.mean(
            np.stack([-np.sum(np.exp(lp) * lp, axis=1) for lp in ref_lp], axis=1), axis=1
        )
        groups: list[Group] = [
            build_group(
                prompts[g], rollouts[g * G : (g + 1) * G], base[g * G : (g + 1) * G],
                h_old[g * G : (g + 1) * G], h_ref[g * G : (g + 1) * G], cb, cfg,
            )
            for g in range(len(prompts))
        ]
        skipped = sum(group.skipped for group in groups)
        if skipped:
            logger.warning(f"step {step}: {skipped} zero-variance group(s) contribute no surrogate gradient")
        reweighted = np.concatenate([group.reweighted for group in groups])
        weights = np.concatenate([group.kl_weights for group in groups])
        logp_old = np.concatenate([group.logp_old for group in groups])

        try:
            for _ in range(cfg.inner_epochs):
                with nx.Tape() as tape:
                    new_lp = policy_log_probs(theta, cond, tokens)
                    logp_new = gather_tokens(new_lp, tokens)
                    floor_hits = 0
                    per_step = []
                    for lp, q in zip(new_lp, ref_lp):
                        kl, hits = kl_from_log_probs(lp, q)
                        per_step.append(kl)
                        floor_hits += hits
                    kl_tokens = nx.stack(per_step, axis=1)
                    objective, stats = clipped_objective(
                        reweighted, weights, logp_old, logp_new, kl_tokens, cfg.clip_eps
                    )
                    loss = nx.neg(objective)
                    if cfg.entropy_loss_ablation:
                        h_new = nx.mean(token_entropy_matrix(new_lp), axis=1)
                        loss = nx.add(loss, entropy_loss_ablation(nx.sub(h_ref, h_new), cfg.entropy_lambda))
                    grads = tape.backward(loss)
                grad_list = [grads.get(p, np.zeros_like(p.data)) for p in params]
                nx.zero_grad(params)
                pending.append(grad_list)
                grad_norm = global_grad_norm(_average(pending))
                if len(pending) == cfg.grad_accumulation:
                    _apply(optimizer, pending, cfg.max_grad_norm)
        except NumericalError as err:
            dump_groups(output_dir / NAN_DUMP_FILE, step, groups, str(err))
            raise
        if floor_hits:
            logger.warning(f"step {step}: reference log-probability floor hit {floor_hits} time(s)")

        stats = stats.model_copy(
            update={
                "mean_entropy": float(h_old.mean()),
                "grad_norm": grad_norm,
                "skipped_groups": skipped,
                "log_floor_hits": floor_hits,
            }
        )
        elapsed = time.perf_counter() - started
        writer.append(
            MetricsRecord(
                step=step,
                mean_reward=float(base.mean()),
                max_reward=float(base.max()),
                mean_advantage=float(np.mean([group.advantages.mean() for group in groups])),
                mean_ref_entropy=float(h_ref.mean()),
                ratio_clamped=int(stats.ratio_clamped),
                **stats.model_dump(exclude={"ratio_clamped"}),
                wall_clock=elapsed if cfg.log_wall_clock else None,
                **_task_means(base, expanded),
            )
        )
        logger.info(
            f"step {step}: reward {base.mean():.4f} kl {stats.mean_kl:.5f} entropy {stats.mean_entropy:.4f} "
            f"clip {stats.clip_fraction:.3f} ({elapsed:.2f}s)"
        )

        if cfg.render_every and step % cfg.render_every == 0:
            render_grid(cb, rollouts[0].tokens, cfg.shape, output_dir / RENDERS_DIR / f"step_{step:05d}.ppm", scale=8)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            report = evaluate(
                theta, cb, heldout, cfg.eval_samples, cfg.temperature, cfg.eval_seed, cfg.counting_clamp
            )
            append_eval(eval_path, step + 1, report)
            logger.info(f"eval at step {step + 1}: reward {report.overall.mean_reward:.4f}")

    if pending:
        logger.info(f"Applying {len(pending)} leftover accumulated micro-batch(es)")
        _apply(optimizer, pending, cfg.max_grad_norm)
    return save_checkpoint(theta, output_dir / POLICY_CHECKPOINT)


def _load_for_eval(checkpoint: Path, cfg: TrainConfig) -> tuple[PolicyParams, Codebook]:
    theta = load_checkpoint(checkpoint, trainable=False)
    _check_dims(theta, cfg)
    return theta, codebook_for(cfg)


def run_evaluate(
    cfg: TrainConfig,
    checkpoint: Path,
    prompts: Sequence[PromptSpec] | None,
    n_samples: int,
    temperature: float,
    output: Path | None = None,
) -> EvalReport:
    theta, cb = _load_for_eval(checkpoint, cfg)
    report = evaluate(
        theta, cb, prompts if prompts is not None else heldout_set(cfg), n_samples, temperature,
        cfg.eval_seed, cfg.counting_clamp, cfg.cfg_scale,
    )
    if output is not None:
        Path(output).unlink(missing_ok=True)
        append_eval(output, 0, report)
    return report


def run_temperature_sweep(
    cfg: TrainConfig,
    checkpoint: Path,
    temperatures: Sequence[float],
    prompts: Sequence[PromptSpec] | None,
    output: Path,
    n_samples: int = SWEEP_SAMPLES,
) -> pd.DataFrame:
    """Write the sweep table, then fail if entropy ever decreases with temperature."""
    theta, cb = _load_for_eval(checkpoint, cfg)
    table = temperature_sweep(
        theta, cb, prompts if prompts is not None else heldout_set(cfg), temperatures, n_samples, cfg.eval_seed
    )
    write_table(table, output)
    check_entropy_monotone(table)
    return table


def run_render(
    cfg: TrainConfig,
    output: Path,
    checkpoint: Path | None = None,
    prompt: PromptSpec | None = None,
    tokens: Sequence[int] | None = None,
    scale: int = 1,
    temperature: float = 1.0,
) -> Path:
    cb = codebook_for(cfg)
    if tokens is None:
        if checkpoint is None or prompt is None:
            raise ValueError("Rendering needs either explicit tokens or a checkpoint and a prompt")
        theta, _ = _load_for_eval(checkpoint, cfg)
        rollout = sample_rollouts(theta, [prompt], temperature, Rng(cfg.seed, (STREAM_SAMPLING,)), cfg_scale=cfg.cfg_scale)[0]
        tokens = rollout.tokens.tolist()
        logger.info(f"Sampled grid scores {score(rollout.tokens, cb, prompt, cfg.shape, cfg.counting_clamp):.4f}")
    path = render_grid(cb, tokens, cfg.shape, output, scale=scale)
    logger.info(f"Rendered grid to {path}")
    return path
