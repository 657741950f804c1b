from typing import Dict, Optional

import numpy as np

from app.constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON
from app.constants.status import Status
from app.lib.exception import TmException

Params = Dict[str, np.ndarray]


class Adam:
    """Adaptive moment estimation over a dict of named parameter arrays."""

    def __init__(self, params: Params, learning_rate: float = 1e-3, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPSILON) -> None:
        if learning_rate <= 0:
            raise TmException(Status.DOMAIN_ERROR, f"learning_rate must be > 0, got {learning_rate}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: Params, grads: Params) -> Params:
        """Returns updated copies; the inputs are left untouched."""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        updated: Params = {}
        for name, value in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            updated[name] = value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


class EarlyStopping:
    """
    Patience counter over a monitored loss.

    `best_epoch` always points at the lowest loss seen so far. The patience counter
    only resets when a loss beats the last counted improvement by more than `min_delta`.
    """

    def __init__(self, patience: int = 5, min_delta: float = 0.0):
        if patience < 1 or min_delta < 0:
            raise TmException(Status.DOMAIN_ERROR,
                              f"patience must be >= 1 and min_delta >= 0, got {patience} and {min_delta}")
        self.patience = patience
        self.min_delta = min_delta
        self.counter = 0
        self.best_loss: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.early_stop = False
        self._reference: Optional[float] = None

    def __call__(self, loss: float, epoch: int) -> bool:
        """Records one epoch; returns True when `loss` is the new best."""
        improved = self.best_loss is None or loss < self.best_loss
        if improved:
            self.best_loss = loss
            self.best_epoch = epoch

        if self._reference is None or loss < self._reference - self.min_delta:
            self._reference = loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.early_stop = True
        return improved
