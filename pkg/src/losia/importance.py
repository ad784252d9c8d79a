"""Sensitivity-based parameter importance with EMA smoothing and uncertainty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, StateError


def raw_importance(grad: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Second-order sensitivity of zeroing each weight.

    ``|g*w - 0.5*(g*w)**2|`` with ``g`` the batch-mean gradient; the squared
    batch gradient stands in for the mean of squared per-sample gradients.
    """
    if grad.shape != weight.shape:
        raise DimensionError(f"gradient shape {grad.shape} != weight shape {weight.shape}")
    gw = grad * weight
    return np.abs(gw - 0.5 * gw * gw)


def grad_score(grad: np.ndarray) -> np.ndarray:
    return np.abs(grad)


@dataclass
class ImportanceState:
    """EMA sensitivity ``sens`` and uncertainty ``unc`` for one weight matrix.

    ``post_update_delta`` selects the alternative reading of the uncertainty
    term where the deviation is measured against the freshly updated EMA.
    """

    layer: str
    sens: np.ndarray
    unc: np.ndarray
    beta1: float = 0.85
    beta2: float = 0.85
    steps: int = 0
    post_update_delta: bool = False

    @classmethod
    def zeros(cls, layer, shape, beta1=0.85, beta2=0.85, post_update_delta=False, dtype=np.float64):
        for b in (beta1, beta2):
            if not 0.0 < b < 1.0:
                raise ConfigError(f"EMA factor {b} must lie in (0, 1)")
        return cls(layer, np.zeros(shape, dtype), np.zeros(shape, dtype), beta1, beta2, 0,
                   post_update_delta)

    def update(self, I: np.ndarray):
        ema_update(self, I)
        return self

    def observe(self, grad, weight):
        """Score-first hook entry: called before the optimizer moves ``weight``."""
        return self.update(raw_importance(grad, weight))

    def score(self):
        return score(self)


def ema_update(state: ImportanceState, I: np.ndarray) -> ImportanceState:
    """Fold one raw-importance sample into ``state`` in place and return it."""
    if I.shape != state.sens.shape:
        raise DimensionError(f"importance shape {I.shape} != state shape {state.sens.shape}")
    b1, b2 = state.beta1, state.beta2
    if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
        raise ConfigError(f"EMA factors ({b1}, {b2}) must lie in (0, 1)")
    prev = state.sens
    state.sens = b1 * prev + (1.0 - b1) * I
    delta = np.abs(I - (state.sens if state.post_update_delta else prev))
    state.unc = b2 * state.unc + (1.0 - b2) * delta
    state.steps += 1
    return state


def score(state: ImportanceState) -> np.ndarray:
    if state.steps < 1:
        raise StateError(f"no importance accumulated for layer {state.layer!r}")
    return state.sens * state.unc


class GradientImportance(ImportanceState):
    """EMA of absolute gradients, used by the gradient-localization ablation.

    ``update`` takes the gradient itself; ``score`` is the smoothed magnitude.
    """

    def update(self, grad: np.ndarray):
        if grad.shape != self.sens.shape:
            raise DimensionError(f"gradient shape {grad.shape} != state shape {self.sens.shape}")
        self.sens = self.beta1 * self.sens + (1.0 - self.beta1) * np.abs(grad)
        self.steps += 1
        return self

    def observe(self, grad, weight):
        return self.update(grad)

    def score(self):
        if self.steps < 1:
            raise StateError(f"no importance accumulated for layer {self.layer!r}")
        return self.sens.copy()
