"""CSV emission for training runs, evaluation tables and run comparison."""

import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from grid_grpo.constants import (
    COMPARE_COLUMNS,
    DRIFT_TAIL_FRACTION,
    EVAL_COLUMNS,
    METRICS_COLUMNS,
)
from grid_grpo.contract import validate_step_grids
from grid_grpo.models.records import EvalReport, MetricsRecord


class MetricsWriter:
    """Append-only ``metrics.csv``: fixed header, one row per update step."""

    def __init__(self, path: Path, include_wall_clock: bool = False) -> None:
        self.path = Path(path)
        self.columns = METRICS_COLUMNS + (["wall_clock"] if include_wall_clock else [])
        self.rows = 0
        self.path.unlink(missing_ok=True)

    def append(self, record: MetricsRecord) -> None:
        if record.step != self.rows:
            raise ValueError(f"Metrics rows must be contiguous: expected step {self.rows}, got {record.step}")
        values = record.model_dump()
        frame = pd.DataFrame([[values[column] for column in self.columns]], columns=self.columns)
        frame.to_csv(self.path, mode="a", header=self.rows == 0, index=False, na_rep="nan")
        self.rows += 1


def eval_frame(step: int, report: EvalReport) -> pd.DataFrame:
    rows = [
        [step, task, score.mean_reward, score.std_reward, score.mean_entropy, score.samples]
        for task, score in [*report.per_task.items(), ("overall", report.overall)]
    ]
    return pd.DataFrame(rows, columns=EVAL_COLUMNS)


def append_eval(path: Path, step: int, report: EvalReport) -> None:
    path = Path(path)
    eval_frame(step, report).to_csv(path, mode="a", header=not path.exists(), index=False)


def write_table(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def dump_groups(path: Path, step: int, groups: Iterable[Any], error: str) -> Path:
    """Diagnostic JSON for a numerical abort: the full state of every group in the step."""
    path = Path(path)
    payload = {"step": step, "error": error, "groups": [group.to_dict() for group in groups]}
    path.write_text(json.dumps(payload, indent=2, default=str))
    logger.error(f"Numerical failure at step {step}; groups dumped to {path}")
    return path


def _unique_names(paths: Sequence[Path]) -> list[str]:
    names: list[str] = []
    for index, path in enumerate(paths):
        name = path.parent.name or path.stem
        names.append(name if name not in names else f"{name}#{index}")
    return names


def _summarize(frame: pd.DataFrame) -> dict[str, float]:
    tail = max(1, math.ceil(DRIFT_TAIL_FRACTION * len(frame)))
    drift = (frame["mean_entropy"] - frame["mean_ref_entropy"]).abs().tail(tail)
    return {
        "final_reward": float(frame["mean_reward"].iloc[-1]),
        "entropy_drift": float(drift.mean()),
        "mean_kl": float(frame["mean_kl"].mean()),
        "auc": float(np.trapezoid(frame["mean_reward"].to_numpy(), frame["step"].to_numpy())),
    }


def compare_runs(paths: Sequence[Path], names: Sequence[str] | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-run summary and its differences against the first run."""
    paths = [Path(p) for p in paths]
    names = list(names) if names is not None else _unique_names(paths)
    if len(names) != len(paths) or len(set(names)) != len(names):
        raise ValueError(f"Run names must be unique and match the metrics files: {names}")
    frames = {name: pd.read_csv(path) for name, path in zip(names, paths)}
    for name, frame in frames.items():
        if frame.empty:
            raise ValueError(f"Metrics file for run {name} has no rows")
    validate_step_grids({name: frame["step"].astype(int).tolist() for name, frame in frames.items()})

    report = pd.DataFrame(
        [{"run": name, **_summarize(frame)} for name, frame in frames.items()],
        columns=COMPARE_COLUMNS,
    )
    metrics = COMPARE_COLUMNS[1:]
    deltas = report.copy()
    deltas[metrics] = report[metrics] - report[metrics].iloc[0]
    return report, deltas


def format_comparison(report: pd.DataFrame, deltas: pd.DataFrame) -> str:
    return (
        report.to_string(index=False, float_format=lambda v: f"{v:.6f}")
        + "\n\ndifference from "
        + str(report["run"].iloc[0])
        + ":\n"
        + deltas.to_string(index=False, float_format=lambda v: f"{v:+.6f}")
    )


def run_compare(paths: Sequence[Path], output: Path | None = None) -> str:
    report, deltas = compare_runs(paths)
    if output is not None:
        output = Path(output)
        write_table(report, output)
        write_table(deltas, output.with_name(f"{output.stem}_deltas{output.suffix or '.csv'}"))
    return format_comparison(report, deltas)
