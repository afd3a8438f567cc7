from typing import Sequence

import numpy as np

from grid_grpo.numerics import NumericalError, Tensor


class Adam:
    """Bias-corrected Adam over a fixed, ordered list of parameter tensors."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        if not lr > 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"Expected {len(self.params)} gradients, got {len(grads)}")
        self.t += 1
        for i, (param, grad) in enumerate(zip(self.params, grads)):
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite gradient for parameter {i}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * grad * grad
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            param.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    """Scale gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm is None or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / (norm + 1e-12)
    return [g * scale for g in grads], norm
