# app/services/optim.py
"""Optimizers over named parameter dicts. Parameters are updated in place."""
from typing import Dict, Mapping

import numpy as np

from app.core.errors import ConfigurationError
from app.models.schemas import OptimizerKind


class GradientDescent:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 1e-2) -> None:
        self.params = dict(params)
        self.lr = lr

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            self.params[name] -= self.lr * grad


class Adam:
    """Classic Adam with bias-corrected moment estimates.

    Args:
        params: Named tensors to update.
        lr: Learning rate.
        beta1: Exponential decay for first moment.
        beta2: Exponential decay for second moment.
        eps: Numerical stability term.
    """

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for name, grad in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad**2
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            self.params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: OptimizerKind, params: Mapping[str, np.ndarray], lr: float):
    if kind is OptimizerKind.ADAM:
        return Adam(params, lr=lr)
    if kind is OptimizerKind.GRADIENT_DESCENT:
        return GradientDescent(params, lr=lr)
    raise ConfigurationError(f"unknown optimizer {kind!r}")
