import functools
import sys
import types
from pathlib import Path
from typing import Any, Callable, Literal, Union, get_args, get_origin

import click
from loguru import logger

from grid_grpo.__about__ import version
from grid_grpo.constants import CONFIG_FILE, LOG_LEVELS, PRESETS, SWEEP_SAMPLES, SWEEP_TEMPERATURES, TASKS
from grid_grpo.models.config import TrainConfig, resolve_config
from grid_grpo.models.prompts import PromptRecord
from grid_grpo.numerics import NumericalError, Rng
from grid_grpo.report import run_compare
from grid_grpo.tasks import load_prompt_set, sample_prompts, write_prompt_set
from grid_grpo.trainer import run_evaluate, run_pretrain, run_render, run_rl, run_temperature_sweep

EXISTING_FILE = click.Path(path_type=Path, exists=True, readable=True, file_okay=True, dir_okay=False)
OUTPUT_FILE = click.Path(path_type=Path, dir_okay=False, writable=True)
OUTPUT_DIR = click.Path(path_type=Path, file_okay=False, dir_okay=True, writable=True)


def _field_option(name: str, annotation: Any, description: str | None) -> Callable | None:
    flag = "--" + name.replace("_", "-")
    optional_args = [a for a in get_args(annotation) if a is not type(None)]
    if get_origin(annotation) in (Union, types.UnionType) and len(optional_args) == 1:
        annotation = optional_args[0]
    if annotation is bool:
        return click.option(f"{flag}/--no-{flag[2:]}", name, default=None, help=description)
    if get_origin(annotation) is Literal:
        return click.option(flag, name, type=click.Choice(get_args(annotation), case_sensitive=False), default=None, help=description)
    if get_origin(annotation) is tuple:
        return click.option(flag, name, type=float, nargs=2, default=None, help=description)
    if annotation in (int, float):
        return click.option(flag, name, type=annotation, default=None, help=description)
    return None


def config_options(func: Callable) -> Callable:
    """Preset, config file and one override flag per TrainConfig field."""
    for name, info in reversed(list(TrainConfig.model_fields.items())):
        option = _field_option(name, info.annotation, info.description)
        if option is not None:
            func = option(func)
    func = click.option(
        "--task-weight",
        "task_weight",
        multiple=True,
        metavar="TASK=WEIGHT",
        help=f"Prompt sampling weight, repeatable; tasks: {', '.join(TASKS)}. Unlisted tasks get weight 0.",
    )(func)
    func = click.option(
        "--preset",
        type=click.Choice(sorted(PRESETS), case_sensitive=False),
        default=None,
        help="Named hyperparameter preset applied before the config file and flags.",
    )(func)
    func = click.option("--config", "config_path", type=EXISTING_FILE, default=None, help="TrainConfig JSON file.")(func)
    return func


def _parse_task_weights(entries: tuple[str, ...]) -> dict[str, float] | None:
    if not entries:
        return None
    weights = {}
    for entry in entries:
        task, sep, weight = entry.partition("=")
        if not sep:
            raise ValueError(f"--task-weight expects TASK=WEIGHT, got {entry!r}")
        weights[task.strip()] = float(weight)
    return weights


def _resolve(
    preset: str | None,
    config_path: Path | None,
    task_weight: tuple[str, ...],
    overrides: dict[str, Any],
    fallback_config: Path | None = None,
) -> TrainConfig:
    if config_path is None and fallback_config is not None and fallback_config.exists():
        logger.info(f"Using run configuration {fallback_config}")
        config_path = fallback_config
    values = {key: value for key, value in overrides.items() if value not in (None, ())}
    weights = _parse_task_weights(task_weight)
    if weights is not None:
        values["task_weights"] = weights
    return resolve_config(preset=preset, config_path=config_path, overrides=values)


def _exit_codes(func: Callable) -> Callable:
    """Map failures to exit codes: 2 bad input, 3 numerical failure, 4 I/O failure."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except NumericalError as err:
            logger.error(f"Numerical failure: {err}")
            ctx.exit(3)
        except ValueError as err:
            logger.error(f"Invalid input: {err}")
            ctx.exit(2)
        except OSError as err:
            logger.error(f"I/O failure: {err}")
            ctx.exit(4)

    return wrapper


def _prompts_from(path: Path | None) -> list | None:
    return None if path is None else [record.to_spec() for record in load_prompt_set(path)]


@click.group(help="GRPO training engine for autoregressive token-grid generation")
@click.option(
    "--log-level",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    default="INFO",
    show_default=True,
    help="Minimum level of log messages written to stderr.",
)
@click.version_option(version, prog_name="grid-grpo")
def cli(log_level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=log_level.upper())


@cli.command(short_help="Pretrain the reference policy", help="Supervised pretraining on synthetic prompt-satisfying grids")
@click.option("--output-dir", type=OUTPUT_DIR, required=True, help="Run directory for the reference checkpoint.")
@config_options
@_exit_codes
def pretrain(output_dir: Path, preset: str | None, config_path: Path | None, task_weight: tuple[str, ...], **overrides: Any) -> None:
    cfg = _resolve(preset, config_path, task_weight, overrides)
    checkpoint, report = run_pretrain(cfg, output_dir)
    click.echo(f"reference checkpoint: {checkpoint}")
    for task, task_score in report.per_task.items():
        click.echo(f"{task}: {task_score.mean_reward:.4f}")


@cli.command(short_help="Fine-tune with GRPO", help="Fine-tune a reference checkpoint with group-relative policy optimization")
@click.option("--reference", type=EXISTING_FILE, required=True, help="Reference policy checkpoint.")
@click.option("--output-dir", type=OUTPUT_DIR, required=True, help="Run directory for metrics and checkpoints.")
@click.option("--prompt-set", type=EXISTING_FILE, default=None, help="Line-delimited JSON prompt set to draw from.")
@config_options
@_exit_codes
def train(
    reference: Path,
    output_dir: Path,
    prompt_set: Path | None,
    preset: str | None,
    config_path: Path | None,
    task_weight: tuple[str, ...],
    **overrides: Any,
) -> None:
    cfg = _resolve(preset, config_path, task_weight, overrides)
    records = load_prompt_set(prompt_set) if prompt_set is not None else None
    click.echo(f"policy checkpoint: {run_rl(cfg, reference, output_dir, records)}")


@cli.command(name="eval", short_help="Evaluate a checkpoint", help="Sample and score grids for a prompt set")
@click.option("--checkpoint", type=EXISTING_FILE, required=True, help="Policy checkpoint.")
@click.option("--prompt-set", type=EXISTING_FILE, default=None, help="Prompt set; defaults to the held-out set.")
@click.option("--n-samples", type=click.IntRange(min=1), default=1, show_default=True, help="Samples per prompt.")
@click.option("--output", type=OUTPUT_FILE, default=None, help="Optional CSV for the per-task table.")
@config_options
@_exit_codes
def evaluate(
    checkpoint: Path,
    prompt_set: Path | None,
    n_samples: int,
    output: Path | None,
    preset: str | None,
    config_path: Path | None,
    task_weight: tuple[str, ...],
    **overrides: Any,
) -> None:
    cfg = _resolve(preset, config_path, task_weight, overrides, checkpoint.parent / CONFIG_FILE)
    report = run_evaluate(cfg, checkpoint, _prompts_from(prompt_set), n_samples, cfg.temperature, output)
    for task, task_score in [*report.per_task.items(), ("overall", report.overall)]:
        click.echo(
            f"{task}: reward {task_score.mean_reward:.4f} +/- {task_score.std_reward:.4f}, "
            f"entropy {task_score.mean_entropy:.4f} ({task_score.samples} samples)"
        )


@cli.command(name="sweep-temp", short_help="Temperature sweep", help="Mean sample entropy and reward across sampling temperatures")
@click.option("--checkpoint", type=EXISTING_FILE, required=True, help="Policy checkpoint.")
@click.option(
    "--temperatures",
    "-t",
    type=float,
    multiple=True,
    default=SWEEP_TEMPERATURES,
    show_default=True,
    help="Sampling temperatures, ascending; repeatable.",
)
@click.option("--prompt-set", type=EXISTING_FILE, default=None, help="Prompt set; defaults to the held-out set.")
@click.option(
    "--n-samples", type=click.IntRange(min=1), default=SWEEP_SAMPLES, show_default=True, help="Samples per prompt."
)
@click.option("--output", type=OUTPUT_FILE, required=True, help="CSV for the sweep table.")
@config_options
@_exit_codes
def sweep_temp(
    checkpoint: Path,
    temperatures: tuple[float, ...],
    prompt_set: Path | None,
    n_samples: int,
    output: Path,
    preset: str | None,
    config_path: Path | None,
    task_weight: tuple[str, ...],
    **overrides: Any,
) -> None:
    cfg = _resolve(preset, config_path, task_weight, overrides, checkpoint.parent / CONFIG_FILE)
    table = run_temperature_sweep(cfg, checkpoint, list(temperatures), _prompts_from(prompt_set), output, n_samples)
    click.echo(table.to_string(index=False))


@cli.command(short_help="Compare runs", help="Summarize and compare metrics CSVs that share one step grid")
@click.argument("metrics", nargs=-1, type=EXISTING_FILE)
@click.option("--output", type=OUTPUT_FILE, default=None, help="Optional CSV for the comparison table.")
@_exit_codes
def compare(metrics: tuple[Path, ...], output: Path | None) -> None:
    click.echo(run_compare(list(metrics), output))


@cli.command(short_help="Render a grid", help="Render a token list, or a grid sampled from a checkpoint, as a PPM image")
@click.option("--output", type=OUTPUT_FILE, required=True, help="Destination PPM file.")
@click.option("--checkpoint", type=EXISTING_FILE, default=None, help="Policy checkpoint to sample from.")
@click.option("--prompt", "prompt_json", type=str, default=None, help="Prompt record as JSON.")
@click.option("--tokens", type=str, default=None, help="Comma-separated token ids to render instead of sampling.")
@click.option("--scale", type=click.IntRange(min=1), default=8, show_default=True, help="Pixels per grid cell.")
@config_options
@_exit_codes
def render(
    output: Path,
    checkpoint: Path | None,
    prompt_json: str | None,
    tokens: str | None,
    scale: int,
    preset: str | None,
    config_path: Path | None,
    task_weight: tuple[str, ...],
    **overrides: Any,
) -> None:
    fallback = checkpoint.parent / CONFIG_FILE if checkpoint is not None else None
    cfg = _resolve(preset, config_path, task_weight, overrides, fallback)
    prompt = PromptRecord.model_validate_json(prompt_json).to_spec() if prompt_json else None
    token_ids = [int(t) for t in tokens.split(",")] if tokens else None
    click.echo(f"rendered: {run_render(cfg, output, checkpoint, prompt, token_ids, scale, cfg.temperature)}")


@cli.command(name="make-prompts", short_help="Write a prompt set", help="Sample prompts with the configured task weights into line-delimited JSON")
@click.option("--output", type=OUTPUT_FILE, required=True, help="Destination JSONL file.")
@click.option("--count", type=click.IntRange(min=1), default=64, show_default=True, help="Number of prompts.")
@config_options
@_exit_codes
def make_prompts(
    output: Path,
    count: int,
    preset: str | None,
    config_path: Path | None,
    task_weight: tuple[str, ...],
    **overrides: Any,
) -> None:
    cfg = _resolve(preset, config_path, task_weight, overrides)
    prompts = sample_prompts(cfg.task_weights, count, cfg.shape, cfg.num_categories, Rng(cfg.seed), cfg.max_count)
    click.echo(f"prompt set: {write_prompt_set(prompts, output)}")
