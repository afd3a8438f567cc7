"""Autoregressive categorical policy over grid tokens.

A gated recurrent core reads the conditioning vector, the previous token, a
sinusoidal row/column code and the counting progress of the prefix, and emits
logits over the vocabulary for the next cell in raster order. The start of a
sequence is a learned initial state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from grid_grpo import numerics as nx
from grid_grpo.constants import POSITION_CODE_DIM, TASKS
from grid_grpo.contract import validate_prompt, validate_token_ids
from grid_grpo.models.prompts import GridShape, PromptSpec
from grid_grpo.numerics import NumericalError, Rng, Tensor
from grid_grpo.optim import Adam

PARAM_ORDER: tuple[str, ...] = (
    "W_c",
    "b_c",
    "h_init",
    "emb",
    "W_pos",
    "W_count",
    "Wz",
    "Uz",
    "bz",
    "Wr",
    "Ur",
    "br",
    "Wn",
    "Un",
    "bn",
    "W_out",
    "b_out",
)


def conditioning_width(shape: GridShape, num_categories: int) -> int:
    # task | category A | category B | count | relation | region mask | text letters | text length
    return len(TASKS) + 2 * num_categories + 1 + 2 + shape.length + shape.w * num_categories + 1


def encode_prompt(p: PromptSpec, shape: GridShape, num_categories: int) -> np.ndarray:
    validate_prompt(p, shape, num_categories)
    K, T = num_categories, shape.length
    vec = np.zeros(conditioning_width(shape, K))
    vec[TASKS.index(p.task)] = 1.0
    offset = len(TASKS)
    if p.task in ("counting", "position", "region"):
        vec[offset + p.categories[0]] = 1.0
    offset += K
    if p.task == "position":
        vec[offset + p.categories[1]] = 1.0
    offset += K
    if p.target_count is not None:
        vec[offset] = p.target_count / T
    offset += 1
    if p.relation is not None:
        vec[offset + ("left_of", "above").index(p.relation)] = 1.0
    offset += 2
    if p.region is not None:
        vec[offset + np.asarray(p.region, dtype=np.int64)] = 1.0
    offset += T
    if p.task == "text":
        for slot, letter in enumerate(p.categories):
            vec[offset + slot * K + letter] = 1.0
        vec[offset + shape.w * K] = len(p.categories) / shape.w
    return vec


def position_codes(shape: GridShape, dim: int = POSITION_CODE_DIM) -> np.ndarray:
    """Sinusoidal codes: half the channels encode the row, half the column."""
    rows, cols = np.divmod(np.arange(shape.length), shape.w)
    freqs = 1.0 / (10.0 ** (np.arange(dim // 4) / max(dim // 4, 1)))
    parts = []
    for coord in (rows, cols):
        angles = coord[:, None] * freqs[None, :]
        parts.extend([np.sin(angles), np.cos(angles)])
    return np.concatenate(parts, axis=1)


@dataclass
class PolicyParams:
    shape: GridShape
    num_categories: int
    tensors: dict[str, Tensor]

    @property
    def vocab_size(self) -> int:
        return int(self.tensors["emb"].shape[0])

    @property
    def hidden_size(self) -> int:
        return int(self.tensors["h_init"].shape[0])

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def ordered(self) -> list[Tensor]:
        return [self.tensors[name] for name in PARAM_ORDER]

    def snapshot(self) -> "PolicyParams":
        """Frozen copy that no update can reach."""
        frozen = {}
        for name, tensor in self.tensors.items():
            data = tensor.data.copy()
            data.setflags(write=False)
            frozen[name] = Tensor._wrap(data)
        return PolicyParams(self.shape, self.num_categories, frozen)

    def trainable(self) -> "PolicyParams":
        live = {name: Tensor(t.data, requires_grad=True) for name, t in self.tensors.items()}
        return PolicyParams(self.shape, self.num_categories, live)


def init_params(shape: GridShape, num_categories: int, vocab_size: int, hidden_size: int, rng: Rng) -> PolicyParams:
    F = conditioning_width(shape, num_categories)
    D, V, P = hidden_size, vocab_size, POSITION_CODE_DIM

    def dense(rows: int, cols: int) -> np.ndarray:
        return rng.normal((rows, cols)) / np.sqrt(rows)

    arrays = {
        "W_c": dense(F, D),
        "b_c": np.zeros(D),
        "h_init": np.zeros(D),
        "emb": rng.normal((V, D)) * 0.1,
        "W_pos": dense(P, D),
        "W_count": dense(3 * num_categories, D),
        "Wz": dense(D, D),
        "Uz": dense(D, D),
        "bz": np.zeros(D),
        "Wr": dense(D, D),
        "Ur": dense(D, D),
        "br": np.zeros(D),
        "Wn": dense(D, D),
        "Un": dense(D, D),
        "bn": np.zeros(D),
        "W_out": dense(D, V) * 0.1,
        "b_out": np.zeros(V),
    }
    return PolicyParams(shape, num_categories, {name: Tensor(arrays[name], requires_grad=True) for name in PARAM_ORDER})


class CountProgress:
    """Running count of the prompted category for counting prompts.

    Before cell ``t`` each sequence gets three features in the slot of its
    category: the share of remaining cells that must still take the category,
    whether the target is already met, and whether every remaining cell is
    needed. Rows that are not counting prompts (including the all-zero
    unconditional rows) stay zero.
    """

    def __init__(self, cond: np.ndarray, shape: GridShape, num_categories: int, vocab_size: int) -> None:
        K, base = num_categories, len(TASKS)
        self.length = shape.length
        self.num_categories = K
        self.per_category = vocab_size // K
        self.active = cond[:, TASKS.index("counting")].astype(np.float64)
        self.category = np.argmax(cond[:, base : base + K], axis=1)
        self.target = np.rint(cond[:, base + 2 * K] * shape.length)
        self.placed = np.zeros(len(cond))

    def advance(self, t: int, previous: np.ndarray | None) -> np.ndarray:
        if previous is not None:
            self.placed += previous // self.per_category == self.category
        needed = self.target - self.placed
        remaining = self.length - t
        flags = np.stack([np.clip(needed / remaining, 0.0, 1.0), needed <= 0, needed >= remaining], axis=1)
        features = np.zeros((len(self.category), 3, self.num_categories))
        features[np.arange(len(self.category)), :, self.category] = flags * self.active[:, None]
        return features.reshape(len(self.category), -1)


class _Core:
    """Unrolls the recurrent core over a batch of N sequences."""

    def __init__(self, theta: PolicyParams, cond: np.ndarray) -> None:
        self.p = theta.tensors
        self.context = nx.add(nx.matmul(Tensor(cond), self.p["W_c"]), self.p["b_c"])
        self.positions = nx.matmul(Tensor(position_codes(theta.shape)), self.p["W_pos"])
        self.state = nx.tanh(nx.add(self.context, self.p["h_init"]))
        self.progress = CountProgress(cond, theta.shape, theta.num_categories, theta.vocab_size)

    def step(self, t: int, previous: np.ndarray | None) -> Tensor:
        p = self.p
        x = nx.add(self.context, nx.take(self.positions, np.array([t])))
        x = nx.add(x, nx.matmul(Tensor(self.progress.advance(t, previous)), p["W_count"]))
        if previous is not None:
            x = nx.add(x, nx.take(p["emb"], previous))
        h = self.state
        z = nx.sigmoid(x @ p["Wz"] + h @ p["Uz"] + p["bz"])
        r = nx.sigmoid(x @ p["Wr"] + h @ p["Ur"] + p["br"])
        n = nx.tanh(x @ p["Wn"] + (r * h) @ p["Un"] + p["bn"])
        self.state = n + z * (h - n)
        return self.state @ p["W_out"] + p["b_out"]


def _conditioning(theta: PolicyParams, prompts: Sequence[PromptSpec]) -> np.ndarray:
    return np.stack([encode_prompt(p, theta.shape, theta.num_categories) for p in prompts])


def forward_logits(theta: PolicyParams, c: np.ndarray, prefix: Sequence[int] | np.ndarray) -> Tensor:
    """Logits over V for the cell following ``prefix``."""
    ids = validate_token_ids(np.asarray(prefix, dtype=np.int64).reshape(-1), theta.vocab_size)
    if ids.size >= theta.shape.length:
        raise ValueError(f"Prefix length {ids.size} must be below sequence length {theta.shape.length}")
    core = _Core(theta, np.asarray(c, dtype=np.float64).reshape(1, -1))
    logits = core.step(0, None)
    for t in range(1, ids.size + 1):
        logits = core.step(t, ids[t - 1 : t])
    return nx.sum(logits, axis=0)


def policy_log_probs(theta: PolicyParams, cond: np.ndarray, tokens: np.ndarray) -> list[Tensor]:
    """Teacher-forced temperature-1 log-distributions, one ``[N, V]`` tensor per position."""
    tokens = validate_token_ids(tokens, theta.vocab_size)
    if tokens.ndim != 2 or tokens.shape[1] != theta.shape.length:
        raise ValueError(f"Token batch must have shape [N, {theta.shape.length}], got {tokens.shape}")
    core = _Core(theta, cond)
    out = []
    for t in range(theta.shape.length):
        logits = core.step(t, tokens[:, t - 1] if t else None)
        out.append(nx.log_softmax(logits))
    return out


def entropy_from_log_probs(log_probs: Tensor) -> Tensor:
    """Categorical entropy along the last axis."""
    return nx.neg(nx.sum(nx.mul(nx.exp(log_probs), log_probs), axis=-1))


def gather_tokens(log_probs: Sequence[Tensor], tokens: np.ndarray) -> Tensor:
    return nx.stack([nx.gather(lp, tokens[:, t]) for t, lp in enumerate(log_probs)], axis=1)


def token_entropy_matrix(log_probs: Sequence[Tensor]) -> Tensor:
    return nx.stack([entropy_from_log_probs(lp) for lp in log_probs], axis=1)


@dataclass(frozen=True)
class Rollout:
    prompt: PromptSpec
    tokens: np.ndarray
    logp_old: np.ndarray
    temperature: float
    # Entropy of the distribution actually sampled from, per position.
    sample_entropies: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if self.tokens.shape != self.logp_old.shape:
            raise ValueError(f"tokens {self.tokens.shape} and logp_old {self.logp_old.shape} differ in length")
        if np.any(self.logp_old > 0):
            raise ValueError("logp_old entries must be <= 0")


def rollout_batch(theta: PolicyParams, rollouts: Sequence[Rollout]) -> tuple[np.ndarray, np.ndarray]:
    """Conditioning matrix and token matrix for a list of rollouts."""
    cond = _conditioning(theta, [r.prompt for r in rollouts])
    tokens = np.stack([r.tokens for r in rollouts]).astype(np.int64)
    return cond, tokens


def sample_rollouts(
    theta: PolicyParams,
    prompts: Sequence[PromptSpec],
    temperature: float,
    rng: Rng,
    greedy: bool = False,
    cfg_scale: float = 1.0,
) -> list[Rollout]:
    """Sample one sequence per prompt, all prompts advanced together.

    ``logp_old`` always comes from the temperature-1, unguided distribution;
    temperature and guidance only shape what gets drawn.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    N, T = len(prompts), theta.shape.length
    if N == 0:
        return []
    cond = _conditioning(theta, prompts)
    guided = cfg_scale != 1.0
    if guided:
        cond = np.concatenate([cond, np.zeros_like(cond)])

    tokens = np.zeros((N, T), dtype=np.int64)
    logp = np.zeros((N, T))
    entropies = np.zeros((N, T))
    with nx.no_grad():
        core = _Core(theta, cond)
        for t in range(T):
            previous = None
            if t:
                previous = np.concatenate([tokens[:, t - 1]] * (2 if guided else 1))
            logits = core.step(t, previous).data
            if not np.all(np.isfinite(logits)):
                raise NumericalError(f"non-finite logits at position {t}")
            cond_logits = logits[:N]
            drawn = cond_logits
            if guided:
                drawn = logits[N:] + cfg_scale * (cond_logits - logits[N:])
            sampling_lp = nx.log_softmax(drawn, temperature=temperature).data
            probs = np.exp(sampling_lp)
            entropies[:, t] = -np.sum(probs * sampling_lp, axis=1)
            tokens[:, t] = np.argmax(drawn, axis=1) if greedy else rng.categorical(probs)
            base_lp = nx.log_softmax(cond_logits).data
            logp[:, t] = base_lp[np.arange(N), tokens[:, t]]

    return [
        Rollout(prompt=p, tokens=tokens[i], logp_old=logp[i], temperature=temperature, sample_entropies=entropies[i])
        for i, p in enumerate(prompts)
    ]


def sample_rollout(
    theta: PolicyParams,
    p: PromptSpec,
    temperature: float,
    rng: Rng,
    greedy: bool = False,
    cfg_scale: float = 1.0,
) -> Rollout:
    return sample_rollouts(theta, [p], temperature, rng, greedy=greedy, cfg_scale=cfg_scale)[0]


def teacher_forced_logprobs(theta: PolicyParams, r: Rollout) -> Tensor:
    cond, tokens = rollout_batch(theta, [r])
    return nx.sum(gather_tokens(policy_log_probs(theta, cond, tokens), tokens), axis=0)


def token_entropies(theta: PolicyParams, r: Rollout) -> Tensor:
    cond, tokens = rollout_batch(theta, [r])
    return nx.sum(token_entropy_matrix(policy_log_probs(theta, cond, tokens)), axis=0)


def sequence_entropy(theta: PolicyParams, r: Rollout) -> Tensor:
    return nx.mean(token_entropies(theta, r))


def nll_loss(theta: PolicyParams, prompts: Sequence[PromptSpec], targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of target grids."""
    cond = _conditioning(theta, prompts)
    targets = np.asarray(targets, dtype=np.int64)
    return nx.neg(nx.mean(gather_tokens(policy_log_probs(theta, cond, targets), targets)))


def pretrain_step(theta: PolicyParams, optimizer: Adam, batch: Sequence[tuple[PromptSpec, np.ndarray]]) -> float:
    """One supervised maximum-likelihood update; returns the loss before the update."""
    if not batch:
        raise ValueError("pretrain_step needs a non-empty batch")
    prompts = [prompt for prompt, _ in batch]
    targets = np.stack([np.asarray(grid, dtype=np.int64) for _, grid in batch])
    params = theta.ordered()
    with nx.Tape() as tape:
        loss = nll_loss(theta, prompts, targets)
        grads = tape.backward(loss)
    optimizer.step([grads.get(p, np.zeros_like(p.data)) for p in params])
    nx.zero_grad(params)
    return loss.item()


