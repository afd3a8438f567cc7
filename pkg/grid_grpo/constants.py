from typing import Dict, List, Tuple

TASKS: Tuple[str, ...] = ("counting", "position", "region", "text")
RELATIONS: Tuple[str, ...] = ("left_of", "above")
ENTROPY_REWARD_MODES: Tuple[str, ...] = ("top", "all", "off")
LOG_LEVELS: Tuple[str, ...] = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR")

CHECKPOINT_MAGIC = b"STG1"

ZERO_STD_THRESHOLD = 1e-8
RATIO_EXPONENT_CLAMP = 30.0
KL_LOG_FLOOR = 1e-12

POSITION_CODE_DIM = 16
SWEEP_TEMPERATURES: Tuple[float, ...] = (0.5, 0.8, 1.0, 1.2, 1.5)
SWEEP_SAMPLES = 8
MONOTONICITY_TOLERANCE = 1e-9

# Share of final steps averaged when measuring entropy drift between runs.
DRIFT_TAIL_FRACTION = 0.2

METRICS_COLUMNS: List[str] = [
    "step",
    "mean_reward",
    "max_reward",
    "mean_advantage",
    "mean_entropy",
    "mean_ref_entropy",
    "mean_kl",
    "clip_fraction",
    "grad_norm",
    "surrogate",
    "skipped_groups",
    "ratio_clamped",
    "log_floor_hits",
    "reward_counting",
    "reward_position",
    "reward_region",
    "reward_text",
]

EVAL_COLUMNS: List[str] = ["step", "task", "mean_reward", "std_reward", "mean_entropy", "samples"]
SWEEP_COLUMNS: List[str] = ["temperature", "mean_entropy", "mean_reward"]
COMPARE_COLUMNS: List[str] = ["run", "final_reward", "entropy_drift", "mean_kl", "auc"]

METRICS_FILE = "metrics.csv"
EVAL_FILE = "eval.csv"
CONFIG_FILE = "config.json"
REFERENCE_CHECKPOINT = "reference.stg"
POLICY_CHECKPOINT = "policy.stg"
RENDERS_DIR = "renders"
NAN_DUMP_FILE = "nan_dump.json"

PRESETS: Dict[str, Dict[str, object]] = {
    "geneval": {
        "learning_rate": 5e-6,
        "kl_beta": 0.03,
        "grad_accumulation": 1,
        # counting keeps its weight, two-object and position share the
        # position task, colors and attribute binding map to region fills.
        "task_weights": {"counting": 7.0, "position": 5.0, "region": 6.0, "text": 0.0},
    },
    "mixed": {
        "learning_rate": 1e-6,
        "kl_beta": 0.01,
        "grad_accumulation": 2,
    },
    "ocr": {
        "learning_rate": 1e-6,
        "kl_beta": 0.01,
        "task_weights": {"counting": 0.0, "position": 0.0, "region": 0.0, "text": 1.0},
    },
    "desk": {
        "learning_rate": 2e-3,
        "kl_beta": 0.03,
        "eval_samples": 4,
    },
}

# Spawn keys of the independent random streams derived from the root seed.
STREAM_INIT = 1
STREAM_PRETRAIN = 2
STREAM_PROMPTS = 3
STREAM_SAMPLING = 4
STREAM_EVAL = 5
STREAM_HELDOUT = 6
